import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from decoder_attribution.data import synthetic_images  # noqa: E402
from decoder_attribution.models import LinearAutoencoder  # noqa: E402
from decoder_attribution.training import ModelSpec, TrainingConfig, train_autoencoder  # noqa: E402

TINY_SHAPE = (3, 16, 16)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("DECODER_ATTRIBUTION_CACHE", str(tmp_path_factory.getbasetemp() / "cache"))


@pytest.fixture(scope="session")
def tiny_images():
    return synthetic_images(256, 0, TINY_SHAPE)


def _tiny(kind, images, seed=0, epochs=4):
    spec = ModelSpec(kind=kind, image_shape=TINY_SHAPE, widths=(8, 16), codebook_size=32, embedding_dim=8)
    return train_autoencoder(images, spec, TrainingConfig(epochs=epochs, batch_size=32, seed=seed, target_mse=None))


@pytest.fixture(scope="session")
def tiny_vae(tiny_images):
    return _tiny("continuous", tiny_images)


@pytest.fixture(scope="session")
def tiny_vq(tiny_images):
    return _tiny("quantized", tiny_images)


@pytest.fixture(scope="session")
def linear_model():
    return LinearAutoencoder(TINY_SHAPE, latent_dim=16, seed=0, exact=True)


# Acceptance criteria register their outcome here; the summary hook prints one line each.
ACCEPTANCE_RESULTS: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
