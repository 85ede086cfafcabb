"""Encoder/decoder pairs used as inspected models.

Three kinds are provided:

* :class:`LinearAutoencoder` - an orthonormal linear map, exact inverse pair.
* :class:`ConvVAE` - a small convolutional VAE (continuous latent).
* :class:`VQVAE` - the same trunk with a vector-quantized bottleneck.

Models operate on batched torch tensors through :meth:`Autoencoder.encode`
and :meth:`Autoencoder.decode`. The module-level :func:`encode` and
:func:`decode` take a single numpy image or latent, validate its shape and
return numpy arrays.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import quantize_8bit, synthetic_images
from .errors import InvalidInputError

CHECKPOINT_FORMAT = "decoder-attribution-checkpoint/1"


class Autoencoder(nn.Module):
    """Base class: deterministic ``encode`` and a differentiable ``decode``."""

    kind = "continuous"

    def __init__(self, image_shape: Sequence[int], latent_shape: Sequence[int]):
        super().__init__()
        self.image_shape = tuple(int(v) for v in image_shape)
        self.latent_shape = tuple(int(v) for v in latent_shape)
        self.trained = False
        self.training_seed: int | None = None
        self.training_report: dict = {}

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, a: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def arch_config(self) -> dict:
        """Constructor arguments needed to rebuild this model."""
        raise NotImplementedError

    @property
    def dtype(self) -> torch.dtype:
        for t in self.state_dict().values():
            return t.dtype
        return torch.get_default_dtype()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(json.dumps(self.arch_config(), sort_keys=True).encode())
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(str(tensor.dtype).encode())
            h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
        return h.hexdigest()

    @property
    def model_id(self) -> str:
        return f"{self.kind}-{self.content_hash()[:16]}"

    def freeze(self) -> "Autoencoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class LinearAutoencoder(Autoencoder):
    """``decode(a) = W a`` and ``encode(x) = W^T x`` with orthonormal columns.

    With ``exact=True`` the columns of ``W`` are a random subset of the
    standard basis, so both maps are exact in floating point and
    ``encode(decode(a))`` reproduces ``a`` bit for bit. With ``exact=False``
    ``W`` is a random dense orthonormal frame from a QR factorisation.
    """

    def __init__(self, image_shape=(3, 16, 16), latent_dim: int = 16, seed: int = 0, exact: bool = True):
        super().__init__(image_shape, (latent_dim,))
        n_pixels = int(np.prod(self.image_shape))
        if not 1 <= latent_dim <= n_pixels:
            raise InvalidInputError(f"latent_dim must lie in [1, {n_pixels}], got {latent_dim}")
        rng = np.random.default_rng(seed)
        if exact:
            weight = np.zeros((n_pixels, latent_dim))
            rows = np.sort(rng.choice(n_pixels, size=latent_dim, replace=False))
            weight[rows, np.arange(latent_dim)] = 1.0
        else:
            q, r = np.linalg.qr(rng.standard_normal((n_pixels, latent_dim)))
            weight = q * np.sign(np.diag(r))
        self.seed = int(seed)
        self.exact = bool(exact)
        self.register_buffer("weight", torch.from_numpy(weight).to(torch.float64))

    def arch_config(self):
        return {
            "image_shape": list(self.image_shape),
            "latent_dim": self.latent_shape[0],
            "seed": self.seed,
            "exact": self.exact,
        }

    def encode(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight

    def decode(self, a):
        return (a @ self.weight.T).reshape(a.shape[0], *self.image_shape)


def _encoder_trunk(in_ch, widths, out_ch):
    a, b = widths
    return nn.Sequential(
        nn.Conv2d(in_ch, a, 4, 2, 1), nn.SiLU(),
        nn.Conv2d(a, b, 4, 2, 1), nn.SiLU(),
        nn.Conv2d(b, b, 3, 1, 1), nn.SiLU(),
        nn.Conv2d(b, out_ch, 3, 1, 1),
    )


def _decoder_trunk(in_ch, widths, out_ch):
    a, b = widths
    return nn.Sequential(
        nn.Conv2d(in_ch, b, 3, 1, 1), nn.SiLU(),
        nn.ConvTranspose2d(b, b, 4, 2, 1), nn.SiLU(),
        nn.ConvTranspose2d(b, a, 4, 2, 1), nn.SiLU(),
        nn.Conv2d(a, out_ch, 3, 1, 1), nn.Sigmoid(),
    )


def _check_downsample(image_shape):
    c, h, w = image_shape
    if c not in (1, 3) or h % 4 or w % 4:
        raise InvalidInputError(f"image shape must be (1|3, 4k, 4m), got {tuple(image_shape)}")


class ConvVAE(Autoencoder):
    """Four conv layers each way, 4x spatial downsampling, sigmoid output.

    ``encode`` returns the posterior mean; sampling only happens in training.
    SiLU activations keep the decoder smooth for finite-difference checks.
    """

    kind = "continuous"

    def __init__(self, image_shape=(3, 32, 32), latent_channels: int = 4, widths=(16, 32)):
        _check_downsample(image_shape)
        c, h, w = image_shape
        super().__init__(image_shape, (latent_channels, h // 4, w // 4))
        self.widths = tuple(int(v) for v in widths)
        self.encoder = _encoder_trunk(c, self.widths, 2 * latent_channels)
        self.decoder = _decoder_trunk(latent_channels, self.widths, c)

    def arch_config(self):
        return {
            "image_shape": list(self.image_shape),
            "latent_channels": self.latent_shape[0],
            "widths": list(self.widths),
        }

    def posterior(self, x):
        h = self.encoder(x)
        k = self.latent_shape[0]
        return h[:, :k], h[:, k:]

    def encode(self, x):
        return self.posterior(x)[0]

    def decode(self, a):
        return self.decoder(a)


class VQVAE(Autoencoder):
    """Vector-quantized autoencoder with a ``K x d`` codebook.

    ``encode`` returns the continuous encoder output; :meth:`quantize` snaps
    it to the nearest codebook rows. ``decode`` consumes embedding-space
    tensors directly, so generation (decode of snapped codes) and inversion
    (decode of arbitrary embeddings) share one differentiable function.
    """

    kind = "quantized"

    def __init__(self, image_shape=(3, 32, 32), codebook_size: int = 128, embedding_dim: int = 16, widths=(16, 32)):
        _check_downsample(image_shape)
        if codebook_size < 2:
            raise InvalidInputError(f"codebook needs at least 2 entries, got {codebook_size}")
        c, h, w = image_shape
        super().__init__(image_shape, (embedding_dim, h // 4, w // 4))
        self.widths = tuple(int(v) for v in widths)
        self.encoder = _encoder_trunk(c, self.widths, embedding_dim)
        self.decoder = _decoder_trunk(embedding_dim, self.widths, c)
        k = 1.0 / codebook_size
        self.codebook = nn.Parameter(torch.empty(codebook_size, embedding_dim).uniform_(-k, k))

    def arch_config(self):
        return {
            "image_shape": list(self.image_shape),
            "codebook_size": int(self.codebook.shape[0]),
            "embedding_dim": int(self.codebook.shape[1]),
            "widths": list(self.widths),
        }

    def encode(self, x):
        return self.encoder(x)

    def quantize(self, z):
        """Nearest-codebook snap. Returns ``(snapped, indices)``."""
        n, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        book = self.codebook
        dist = (flat * flat).sum(1, keepdim=True) - 2 * flat @ book.T + (book * book).sum(1)
        idx = dist.argmin(1)
        snapped = book[idx].reshape(n, h, w, d).permute(0, 3, 1, 2)
        return snapped, idx.reshape(n, h, w)

    def embed(self, indices):
        """Codebook rows for an ``(N, H, W)`` index tensor, channels first."""
        return self.codebook[indices].permute(0, 3, 1, 2)

    def decode(self, a):
        return self.decoder(a)


MODEL_CLASSES = {"linear": LinearAutoencoder, "continuous": ConvVAE, "quantized": VQVAE}


def _family(model: Autoencoder) -> str:
    for name, cls in MODEL_CLASSES.items():
        if type(model) is cls:
            return name
    raise InvalidInputError(f"unknown model class {type(model).__name__}")


# ---------------------------------------------------------------------------
# single-image numpy API


def _as_batch(model, arr, expected, what):
    arr = np.asarray(arr)
    if arr.shape != tuple(expected):
        raise InvalidInputError(f"{what} shape {arr.shape} does not match model {what} shape {tuple(expected)}")
    return torch.as_tensor(arr, dtype=model.dtype)[None]


def encode(model: Autoencoder, x: np.ndarray) -> np.ndarray:
    """Encoder projection of one image (posterior mean for the VAE)."""
    with torch.no_grad():
        out = model.encode(_as_batch(model, x, model.image_shape, "image"))
    return out[0].double().numpy()


def decode(model: Autoencoder, a: np.ndarray) -> np.ndarray:
    """Decoder output for one latent, values in [0, 1] for the conv models."""
    with torch.no_grad():
        out = model.decode(_as_batch(model, a, model.latent_shape, "latent"))
    return out[0].double().numpy()


def nearest_codebook_embedding(model: VQVAE, a: np.ndarray) -> np.ndarray:
    if model.kind != "quantized":
        raise InvalidInputError("nearest_codebook_embedding needs a quantized model")
    with torch.no_grad():
        snapped, _ = model.quantize(_as_batch(model, a, model.latent_shape, "latent"))
    return snapped[0].double().numpy()


def _check_images(model, images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != model.image_shape:
        raise InvalidInputError(
            f"expected images of shape (N, {', '.join(map(str, model.image_shape))}), got {images.shape}"
        )
    return images


def reconstruct(model: Autoencoder, images: np.ndarray, batch_size: int = 256):
    """Batched ``decode(encode(x))`` with codebook snapping for quantized models.

    Returns ``(reconstructions, latents)`` where ``latents`` are the decoder
    inputs actually used.
    """
    images = _check_images(model, images)
    recs, lats = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i:i + batch_size], dtype=model.dtype)
            a = model.encode(x)
            if model.kind == "quantized":
                a, _ = model.quantize(a)
            recs.append(model.decode(a).double().numpy())
            lats.append(a.double().numpy())
    if not recs:
        return np.empty((0, *model.image_shape)), np.empty((0, *model.latent_shape))
    return np.concatenate(recs), np.concatenate(lats)


def make_belonging(model: Autoencoder, x: np.ndarray) -> np.ndarray:
    """A belonging of ``model`` that resembles ``x``: ``decode(encode(x))``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.image_shape:
        raise InvalidInputError(f"image shape {x.shape} does not match model image shape {model.image_shape}")
    return reconstruct(model, x[None])[0][0]


def generate_belongings(model, n, seed, source="pool", pool=None, bits=8):
    """Belonging images plus the decoder inputs that produced them.

    ``source="pool"`` reconstructs ``n`` images drawn from ``pool`` (or from
    fresh synthetic scenes when no pool is given); ``source="prior"`` decodes
    standard-normal latents, or uniformly random codes for a quantized model.
    With ``bits=8`` the outputs are rounded to 8-bit levels, the precision
    they would have after being written to PNG.
    """
    if int(n) != n or n < 1:
        raise InvalidInputError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    rng = np.random.default_rng(seed)
    if source == "pool":
        if pool is None:
            pool = synthetic_images(n, seed, model.image_shape)
            chosen = pool
        else:
            pool = _check_images(model, pool)
            if len(pool) < n:
                raise InvalidInputError(f"pool has {len(pool)} images, need {n}")
            chosen = pool[np.sort(rng.choice(len(pool), size=n, replace=False))]
        images, latents = reconstruct(model, chosen)
    elif source == "prior":
        with torch.no_grad():
            if model.kind == "quantized":
                k = model.codebook.shape[0]
                idx = torch.as_tensor(rng.integers(0, k, size=(n, *model.latent_shape[1:])))
                a = model.embed(idx)
            elif isinstance(model, LinearAutoencoder):
                a = torch.as_tensor(rng.uniform(0, 1, size=(n, *model.latent_shape)), dtype=model.dtype)
            else:
                a = torch.as_tensor(rng.standard_normal((n, *model.latent_shape)), dtype=model.dtype)
            images = model.decode(a).double().numpy()
            latents = a.double().numpy()
    else:
        raise InvalidInputError(f"unknown belonging source {source!r}")
    if bits is not None:
        if bits != 8:
            raise InvalidInputError("only 8-bit storage is supported")
        images = quantize_8bit(images)
    return images, latents


def sample_belongings(model, n, seed, source="pool", pool=None, bits=8) -> np.ndarray:
    """``n`` decoder outputs as an ``(n, C, H, W)`` array; see :func:`generate_belongings`."""
    return generate_belongings(model, n, seed, source=source, pool=pool, bits=bits)[0]


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, writer):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Autoencoder, path) -> str:
    """Write a self-describing ``.npz`` checkpoint; returns the content hash."""
    digest = model.content_hash()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "family": _family(model),
        "kind": model.kind,
        "arch": model.arch_config(),
        "image_shape": list(model.image_shape),
        "latent_shape": list(model.latent_shape),
        "training_seed": model.training_seed,
        "trained": model.trained,
        "training_report": model.training_report,
        "content_hash": digest,
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if model.kind == "quantized":
        arrays["codebook"] = model.codebook.detach().cpu().numpy()

    def writer(tmp):
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    _atomic_write(Path(path), writer)
    return digest


_REQUIRED_META = ("family", "kind", "arch", "content_hash")


def load_checkpoint(path) -> Autoencoder:
    """Rebuild a model from :func:`save_checkpoint` output and verify its hash."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    missing = [k for k in _REQUIRED_META if k not in meta]
    if missing:
        raise InvalidInputError(f"checkpoint {path} is missing required keys: {missing}")
    cls = MODEL_CLASSES.get(meta["family"])
    if cls is None:
        raise InvalidInputError(f"checkpoint {path} has unknown model family {meta['family']!r}")
    arch = dict(meta["arch"])
    arch["image_shape"] = tuple(arch["image_shape"])
    if "widths" in arch:
        arch["widths"] = tuple(arch["widths"])
    with torch.random.fork_rng():
        model = cls(**arch)
    state = model.state_dict()
    if set(params) != set(state):
        raise InvalidInputError(f"checkpoint {path} parameters do not match the {meta['family']} architecture")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    model.trained = bool(meta.get("trained", False))
    model.training_seed = meta.get("training_seed")
    model.training_report = dict(meta.get("training_report") or {})
    model.freeze()
    if model.content_hash() != meta["content_hash"]:
        raise InvalidInputError(f"checkpoint {path} failed its content hash check")
    return model


def latent_rms_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance divided by sqrt(number of coordinates)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return math.sqrt(float(np.mean((a - b) ** 2)))
