"""Detection and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import rankdata

from .errors import InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "acc": self.accuracy}


def _label(v):
    label = v if isinstance(v, str) else getattr(v, "label", None)
    if label not in ("belonging", "non_belonging"):
        raise InvalidInputError(f"not a verdict: {v!r}")
    return label


def confusion(verdicts_belonging, verdicts_other) -> ConfusionCounts:
    """Counts with belongings as the positive class.

    Accepts :class:`~decoder_attribution.attribution.Verdict` objects or
    plain label strings.
    """
    bel = [_label(v) for v in verdicts_belonging]
    oth = [_label(v) for v in verdicts_other]
    if not bel or not oth:
        raise InvalidInputError("both verdict sets must be nonempty")
    tp = sum(lab == "belonging" for lab in bel)
    fp = sum(lab == "belonging" for lab in oth)
    return ConfusionCounts(tp=tp, fp=fp, fn=len(bel) - tp, tn=len(oth) - fp)


def auroc(losses_belonging, losses_other) -> float:
    """P(other loss > belonging loss) + 0.5 P(tie), via the rank-sum statistic."""
    b = np.asarray(losses_belonging, dtype=np.float64).ravel()
    o = np.asarray(losses_other, dtype=np.float64).ravel()
    if b.size == 0 or o.size == 0:
        raise InvalidInputError("both loss sets must be nonempty")
    ranks = rankdata(np.concatenate([b, o]))
    u = ranks[b.size:].sum() - o.size * (o.size + 1) / 2.0
    return float(u / (b.size * o.size))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y) -> float:
    """Mean SSIM over the valid window positions, averaged across channels."""
    x, y = _pair(x, y)
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise InvalidInputError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    w = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    vals = []
    for xc, yc in zip(x.reshape(-1, *x.shape[-2:]), y.reshape(-1, *y.shape[-2:])):
        mx = convolve2d(xc, w, mode="valid")
        my = convolve2d(yc, w, mode="valid")
        sxx = convolve2d(xc * xc, w, mode="valid") - mx * mx
        syy = convolve2d(yc * yc, w, mode="valid") - my * my
        sxy = convolve2d(xc * yc, w, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio for dynamic range 1; ``inf`` for identical images."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def quality_metrics(x, y) -> dict:
    x, y = _pair(x, y)
    diff = x - y
    return {
        "ssim": ssim(x, y),
        "psnr": psnr(x, y),
        "l1": float(np.mean(np.abs(diff))),
        "l2": float(np.mean(diff * diff)),
    }
