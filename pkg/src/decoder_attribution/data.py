"""Image datasets: a procedural generator, PNG I/O and 8-bit storage."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import InvalidInputError

CACHE_ENV = "DECODER_ATTRIBUTION_CACHE"


def cache_dir() -> Path:
    """Directory for cached datasets and models (override with ``$DECODER_ATTRIBUTION_CACHE``)."""
    root = os.environ.get(CACHE_ENV)
    path = Path(root) if root else Path.home() / ".cache" / "decoder_attribution"
    path.mkdir(parents=True, exist_ok=True)
    return path


def synthetic_images(n: int, seed: int, image_shape: Sequence[int] = (3, 32, 32)) -> np.ndarray:
    """Random scenes: a two-colour linear gradient with 1-3 soft discs or squares.

    Returns a float64 array of shape ``(n, C, H, W)`` with values in [0, 1].
    Edges are smoothed over roughly one pixel so small convolutional
    autoencoders can learn the distribution quickly.
    """
    if n < 0:
        raise InvalidInputError(f"n must be >= 0, got {n}")
    channels, height, width = (int(v) for v in image_shape)
    if channels not in (1, 3):
        raise InvalidInputError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / max(height - 1, 1)
    xx = xx / max(width - 1, 1)
    sharpness = 1.5 * max(height, width)
    out = np.empty((n, channels, height, width))
    for i in range(n):
        c0 = rng.uniform(0, 1, channels)[:, None, None]
        c1 = rng.uniform(0, 1, channels)[:, None, None]
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.clip(np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5) + 0.5, 0, 1)
        img = c0 * (1 - ramp) + c1 * ramp
        for _ in range(rng.integers(1, 4)):
            colour = rng.uniform(0, 1, channels)[:, None, None]
            cx, cy = rng.uniform(0.15, 0.85, 2)
            radius = rng.uniform(0.08, 0.3)
            if rng.random() < 0.5:
                dist = np.hypot(xx - cx, yy - cy) - radius
            else:
                dist = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - radius
            mask = 0.5 * (1 - np.tanh(0.5 * dist * sharpness))
            img = img * (1 - mask) + colour * mask
        out[i] = img
    return out


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage, as if the image were saved to PNG."""
    return to_uint8(x).astype(np.float64) / 255.0


def save_png(path, x: np.ndarray) -> None:
    """Write a (C, H, W) float image in [0, 1] as an 8-bit PNG."""
    arr = to_uint8(x)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise InvalidInputError(f"expected (C, H, W) with C in {{1, 3}}, got {arr.shape}")
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB")
    img.save(path, format="PNG")


def load_png(path, channels: int | None = None) -> np.ndarray:
    """Read an image file as a (C, H, W) float64 array in [0, 1]."""
    with Image.open(path) as img:
        img.load()
        if channels == 1 or (channels is None and img.mode in ("L", "I", "I;16")):
            arr = np.asarray(img.convert("L"))[None]
        else:
            arr = np.transpose(np.asarray(img.convert("RGB")), (2, 0, 1))
    return arr.astype(np.float64) / 255.0


def load_folder(path, image_shape: Sequence[int] | None = None) -> np.ndarray:
    """Load every PNG under ``path`` (sorted by name) into an (N, C, H, W) array."""
    folder = Path(path)
    files = sorted(p for p in folder.rglob("*") if p.suffix.lower() == ".png")
    if not files:
        raise InvalidInputError(f"no PNG images found under {folder}")
    channels = int(image_shape[0]) if image_shape is not None else None
    images = [load_png(f, channels) for f in files]
    shape = tuple(image_shape) if image_shape is not None else images[0].shape
    for f, im in zip(files, images):
        if im.shape != shape:
            raise InvalidInputError(f"{f} has shape {im.shape}, expected {shape}")
    return np.stack(images)


def split_dataset(images: np.ndarray, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Shuffle with ``seed`` and cut into consecutive parts of the given fractions."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    n = len(images)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum([0.0] + fractions) * n).astype(int)
    return [images[order[a:b]] for a, b in zip(bounds[:-1], bounds[1:])]
