"""Building and training the desk-scale autoencoders."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, TrainingDivergedError
from .models import MODEL_CLASSES, Autoencoder, ConvVAE, LinearAutoencoder, VQVAE, reconstruct

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture choice. ``kind`` is one of ``linear``, ``continuous``, ``quantized``."""

    kind: str = "continuous"
    image_shape: tuple = (3, 32, 32)
    latent_channels: int = 4
    widths: tuple = (16, 32)
    codebook_size: int = 128
    embedding_dim: int = 16
    latent_dim: int = 16
    exact: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_CLASSES:
            raise InvalidInputError(f"unknown model kind {self.kind!r}; choose from {sorted(MODEL_CLASSES)}")
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))

    def to_dict(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["widths"] = list(self.widths)
        return d


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 2e-3
    seed: int = 0
    kl_weight: float = 1e-4
    commitment_weight: float = 0.25
    target_mse: float | None = 0.01

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise InvalidInputError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.kl_weight < 0 or self.commitment_weight < 0:
            raise InvalidInputError("kl_weight and commitment_weight must be nonnegative")

    def to_dict(self):
        return asdict(self)


def build_model(spec: ModelSpec, seed: int) -> Autoencoder:
    """Freshly initialised model; initialisation depends only on ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if spec.kind == "linear":
            return LinearAutoencoder(spec.image_shape, spec.latent_dim, seed=seed, exact=spec.exact)
        if spec.kind == "continuous":
            return ConvVAE(spec.image_shape, spec.latent_channels, spec.widths)
        return VQVAE(spec.image_shape, spec.codebook_size, spec.embedding_dim, spec.widths)


def _batch_loss(model, xb, cfg, gen):
    if isinstance(model, ConvVAE):
        mean, logvar = model.posterior(xb)
        z = mean + torch.randn(mean.shape, generator=gen, dtype=mean.dtype) * torch.exp(0.5 * logvar)
        mse = F.mse_loss(model.decode(z), xb)
        kld = -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())
        return mse + cfg.kl_weight * kld, mse
    z = model.encode(xb)
    q, _ = model.quantize(z)
    # Straight-through estimator past the non-differentiable snap.
    mse = F.mse_loss(model.decode(z + (q - z).detach()), xb)
    loss = mse + F.mse_loss(q, z.detach()) + cfg.commitment_weight * F.mse_loss(z, q.detach())
    return loss, mse


def reconstruction_mse(model: Autoencoder, images: np.ndarray) -> float:
    """Mean squared error of ``decode(encode(x))`` over ``images``."""
    recs, _ = reconstruct(model, images)
    return float(np.mean((recs - np.asarray(images, dtype=np.float64)) ** 2))


def train_autoencoder(dataset, spec: ModelSpec, cfg: TrainingConfig, heldout=None) -> Autoencoder:
    """Fit an autoencoder to ``dataset`` (an ``(N, C, H, W)`` array in [0, 1]).

    Training is deterministic given ``cfg.seed``. With ``epochs=0`` the
    initialised model is returned with ``trained=False``. The linear model
    has no trainable parameters and is always returned as constructed.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 4 or len(data) == 0:
        raise InvalidInputError(f"dataset must be a nonempty (N, C, H, W) array, got shape {data.shape}")
    if data.shape[1:] != spec.image_shape:
        raise InvalidInputError(f"dataset images have shape {data.shape[1:]}, spec declares {spec.image_shape}")

    model = build_model(spec, cfg.seed)
    model.training_seed = int(cfg.seed)
    report = {"epochs_run": 0, "train_mse": None, "heldout_mse": None}

    if spec.kind != "linear" and cfg.epochs > 0:
        gen = torch.Generator().manual_seed(int(cfg.seed))
        x_all = torch.as_tensor(data, dtype=model.dtype)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        model.train()
        for epoch in range(cfg.epochs):
            perm = torch.randperm(len(x_all), generator=gen)
            total = 0.0
            for step, start in enumerate(range(0, len(x_all), cfg.batch_size)):
                xb = x_all[perm[start:start + cfg.batch_size]]
                loss, mse = _batch_loss(model, xb, cfg, gen)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}, step {step}", epoch=epoch, step=step
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(mse.detach()) * len(xb)
            report["train_mse"] = total / len(x_all)
            report["epochs_run"] = epoch + 1
            log.info("epoch %d/%d train mse %.6f", epoch + 1, cfg.epochs, report["train_mse"])
        model.trained = True

    model.freeze()
    if heldout is not None and len(heldout):
        report["heldout_mse"] = reconstruction_mse(model, heldout)
        if cfg.target_mse is not None and model.trained and report["heldout_mse"] >= cfg.target_mse:
            log.warning("held-out MSE %.5f did not reach target %.5f", report["heldout_mse"], cfg.target_mse)
    if report["train_mse"] is not None and not math.isfinite(report["train_mse"]):
        raise TrainingDivergedError("training ended with a non-finite loss")
    model.training_report = report
    return model
