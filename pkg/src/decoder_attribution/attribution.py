"""Calibrate a per-model loss threshold, then label images against it."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, InvalidInputError
from .grubbs import CalibrationSummary, grubbs_threshold
from .inversion import InversionConfig, invert_many
from .models import Autoencoder, _atomic_write, sample_belongings

BELONGING = "belonging"
NON_BELONGING = "non_belonging"

PROFILE_KEYS = (
    "model_id", "n", "alpha", "mu", "sigma", "threshold", "losses",
    "inversion", "seed", "created_at", "config_hash",
)


@dataclass(frozen=True)
class CalibrationProfile:
    model_id: str
    summary: CalibrationSummary
    threshold: float
    inversion_config: InversionConfig
    calibration_losses: tuple
    seed: int
    created_at: str
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "n": self.summary.n,
            "alpha": self.summary.alpha,
            "mu": self.summary.mu,
            "sigma": self.summary.sigma,
            "threshold": self.threshold,
            "losses": list(self.calibration_losses),
            "inversion": self.inversion_config.to_dict(),
            "seed": self.seed,
            "created_at": self.created_at,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        missing = [k for k in PROFILE_KEYS if k not in d]
        if missing:
            raise InvalidInputError(f"profile is missing required keys: {missing}")
        summary = CalibrationSummary(n=int(d["n"]), mu=float(d["mu"]), sigma=float(d["sigma"]), alpha=float(d["alpha"]))
        losses = tuple(float(v) for v in d["losses"])
        if len(losses) != summary.n:
            raise InvalidInputError(f"profile lists {len(losses)} losses but n={summary.n}")
        return cls(
            model_id=str(d["model_id"]),
            summary=summary,
            threshold=float(d["threshold"]),
            inversion_config=InversionConfig.from_dict(d["inversion"]),
            calibration_losses=losses,
            seed=int(d["seed"]),
            created_at=str(d["created_at"]),
            config_hash=str(d["config_hash"]),
        )

    def recompute_threshold(self) -> float:
        """Threshold rebuilt from the stored losses alone."""
        summary = CalibrationSummary.from_losses(self.calibration_losses, self.summary.alpha)
        return grubbs_threshold(summary)

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips exactly.
        text = json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"
        _atomic_write(Path(path), lambda tmp: Path(tmp).write_text(text))

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read profile {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class Verdict:
    label: str
    cost: float
    threshold: float
    steps_run: int

    @property
    def is_belonging(self) -> bool:
        return self.label == BELONGING


def decide(cost: float, threshold: float) -> str:
    """``belonging`` iff ``cost <= threshold`` (ties count as belonging)."""
    return BELONGING if cost <= threshold else NON_BELONGING


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def calibrate_model(
    model: Autoencoder,
    n: int = 100,
    alpha: float = 0.05,
    cfg: InversionConfig | None = None,
    seed: int = 0,
    source: str = "pool",
    pool=None,
    belongings=None,
) -> CalibrationProfile:
    """Offline phase: invert ``n`` belongings and fit the Grubbs threshold.

    Belongings come from :func:`sample_belongings` unless given explicitly.
    Calibration losses are the best-so-far inversion losses.
    """
    if int(n) != n or n < 3:
        raise InvalidInputError(f"calibration needs n >= 3, got {n!r}")
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha!r}")
    cfg = cfg or InversionConfig()
    if belongings is None:
        belongings = sample_belongings(model, int(n), seed, source=source, pool=pool)
    belongings = np.asarray(belongings, dtype=np.float64)
    if len(belongings) != n:
        raise InvalidInputError(f"expected {n} calibration images, got {len(belongings)}")

    results = invert_many(model, belongings, cfg)
    failed = [i for i, r in enumerate(results) if isinstance(r, Exception)]
    if failed:
        raise CalibrationError(f"{len(failed)} calibration inversions diverged", failed)
    losses = tuple(float(r.best_loss) for r in results)
    summary = CalibrationSummary.from_losses(losses, alpha)
    threshold = grubbs_threshold(summary)
    model_id = model.model_id
    config_hash = _config_hash(
        {"model_id": model_id, "n": int(n), "alpha": float(alpha), "inversion": cfg.to_dict(), "seed": int(seed), "source": source}
    )
    return CalibrationProfile(
        model_id=model_id,
        summary=summary,
        threshold=threshold,
        inversion_config=cfg,
        calibration_losses=losses,
        seed=int(seed),
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
        config_hash=config_hash,
    )


def _check_pair(profile: CalibrationProfile, model: Autoencoder):
    if profile.model_id != model.model_id:
        raise InvalidInputError(f"profile was calibrated for {profile.model_id}, not {model.model_id}")


def attribute_image(profile: CalibrationProfile, model: Autoencoder, x) -> Verdict:
    """Online phase for one image."""
    return batch_attribute(profile, model, [x], return_exceptions=False)[0]


def batch_attribute(
    profile: CalibrationProfile,
    model: Autoencoder,
    images,
    workers: int = 1,
    chunk_size: int = 200,
    return_exceptions: bool = True,
):
    """Verdicts for many images, in input order.

    A failure on one image does not stop the batch: its slot holds the
    exception instead of a :class:`Verdict` (set ``return_exceptions=False``
    to raise instead).
    """
    _check_pair(profile, model)
    images = list(images)
    if not images:
        return []
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if stack.shape[1:] != model.image_shape:
        raise InvalidInputError(f"image shape {stack.shape[1:]} does not match model image shape {model.image_shape}")
    cfg = profile.inversion_config
    t = profile.threshold
    chunks = [stack[i:i + chunk_size] for i in range(0, len(stack), chunk_size)]

    def run(chunk):
        return invert_many(model, chunk, cfg, chunk_size=chunk_size)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]

    out = []
    for r in (r for part in parts for r in part):
        if isinstance(r, Exception):
            if not return_exceptions:
                raise r
            out.append(r)
        else:
            out.append(Verdict(decide(r.best_loss, t), float(r.best_loss), t, int(r.steps_run)))
    return out
