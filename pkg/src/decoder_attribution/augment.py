"""Post-processing transforms used in robustness sweeps.

All transforms take and return ``(C, H, W)`` float images and clamp the
result to [0, 1].
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d

from .data import to_uint8
from .errors import InvalidInputError

KINDS = ("saturation", "contrast", "gaussian_noise", "jpeg", "brightness", "gaussian_blur", "crop")

# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    parameter: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown augmentation {self.kind!r}; choose from {KINDS}")
        try:
            p = float(self.parameter)
        except (TypeError, ValueError):
            p = math.nan
        if not math.isfinite(p):
            raise InvalidInputError(f"parameter must be a finite number, got {self.parameter!r}")
        object.__setattr__(self, "parameter", p)
        if self.kind in ("saturation", "contrast", "brightness") and not p > 0:
            raise InvalidInputError(f"{self.kind} factor must be > 0, got {p}")
        if self.kind == "gaussian_noise" and p < 0:
            raise InvalidInputError(f"noise std must be >= 0, got {p}")
        if self.kind == "jpeg" and not (1 <= p <= 100 and int(p) == p):
            raise InvalidInputError(f"JPEG quality must be an integer in [1, 100], got {p}")
        if self.kind == "gaussian_blur" and not (p >= 1 and int(p) == p):
            raise InvalidInputError(f"blur size must be an integer >= 1, got {p}")
        if self.kind == "crop" and not (0 < p <= 1):
            raise InvalidInputError(f"crop fraction must lie in (0, 1], got {p}")

    @property
    def label(self) -> str:
        return f"{self.kind} {self.parameter:g}"


def _luma(x):
    if x.shape[0] == 1:
        return x[0]
    # Written relative to the red channel so gray pixels map to themselves exactly.
    r, g, b = x
    return r + _LUMA[1] * (g - r) + _LUMA[2] * (b - r)


def _jpeg(x, quality):
    arr = to_uint8(x)
    img = Image.fromarray(arr[0], mode="L") if arr.shape[0] == 1 else Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as out:
        dec = np.asarray(out.convert(img.mode))
    dec = dec[None] if dec.ndim == 2 else np.transpose(dec, (2, 0, 1))
    return dec.astype(np.float64) / 255.0


def gaussian_kernel(k: int) -> np.ndarray:
    """1-D Gaussian taps of length ``2k + 1`` with sigma ``0.5k + 0.5``."""
    sigma = 0.5 * k + 0.5
    r = np.arange(-k, k + 1, dtype=np.float64)
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x, k):
    taps = gaussian_kernel(int(k))
    out = convolve1d(x, taps, axis=1, mode="reflect")
    return convolve1d(out, taps, axis=2, mode="reflect")


def _crop(x, fraction):
    c, h, w = x.shape
    ch = max(1, int(round(h * fraction)))
    cw = max(1, int(round(w * fraction)))
    if (ch, cw) == (h, w):
        return x.copy()
    top = (h - ch) // 2
    left = (w - cw) // 2
    patch = x[:, top:top + ch, left:left + cw]
    out = np.empty_like(x)
    for i in range(c):
        img = Image.fromarray(patch[i].astype(np.float32), mode="F")
        out[i] = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64)
    return out


def augment(x, spec: AugmentationSpec, seed: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise InvalidInputError(f"expected a (C, H, W) image with C in {{1, 3}}, got {x.shape}")
    p = spec.parameter
    if spec.kind == "saturation":
        # Written as x + (p - 1)(x - ref) so a factor of 1 is exactly the identity.
        gray = _luma(x)[None]
        out = x + (p - 1.0) * (x - gray)
    elif spec.kind == "contrast":
        mean = float(np.mean(_luma(x)))
        out = x + (p - 1.0) * (x - mean)
    elif spec.kind == "brightness":
        out = x * p
    elif spec.kind == "gaussian_noise":
        if p == 0:
            out = x.copy()
        else:
            out = x + np.random.default_rng(seed).normal(0.0, p, size=x.shape)
    elif spec.kind == "jpeg":
        out = _jpeg(x, p)
    elif spec.kind == "gaussian_blur":
        out = _blur(x, p)
    else:
        out = _crop(x, p)
    return np.clip(out, 0.0, 1.0)


def augment_batch(images, spec: AugmentationSpec, seed: int = 0) -> np.ndarray:
    """Augment each image; image ``i`` uses noise seed ``seed + i``."""
    return np.stack([augment(im, spec, seed + i) for i, im in enumerate(images)])
