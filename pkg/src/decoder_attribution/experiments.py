"""Experiment drivers: separation, efficiency, stopping rules, robustness."""

from __future__ import annotations

import csv
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attribution import CalibrationProfile, Verdict, batch_attribute
from .augment import AugmentationSpec, augment_batch
from .errors import InvalidInputError
from .inversion import InversionConfig, convergence_step, invert_many
from .metrics import auroc, confusion, quality_metrics

ROBUSTNESS_COLUMNS = ("augmentation", "parameter", "acc", "ssim", "psnr", "l1", "l2")


def _verdicts_only(items):
    bad = [i for i, v in enumerate(items) if not isinstance(v, Verdict)]
    if bad:
        raise RuntimeError(f"{len(bad)} images failed during attribution (first index {bad[0]}): {items[bad[0]]}")
    return items


def separation(profile: CalibrationProfile, model, belongings, others, workers: int = 1) -> dict:
    """Attribute both sets; return confusion counts, accuracy, AUROC and raw verdicts."""
    if len(belongings) == 0 or len(others) == 0:
        raise InvalidInputError("both image sets must be nonempty")
    vb = _verdicts_only(batch_attribute(profile, model, belongings, workers=workers))
    vo = _verdicts_only(batch_attribute(profile, model, others, workers=workers))
    counts = confusion(vb, vo)
    return {
        "confusion": counts,
        "acc": counts.accuracy,
        "auroc": auroc([v.cost for v in vb], [v.cost for v in vo]),
        "verdicts_belonging": vb,
        "verdicts_other": vo,
        "mean_steps": float(np.mean([v.steps_run for v in vb + vo])),
    }


def compare_stopping(profile_fixed, profile_adaptive, model, belongings, others, workers: int = 1) -> dict:
    """Run the same mixed set under a fixed and an adaptive stopping profile."""
    if profile_fixed.inversion_config.stop_rule != "fixed" or profile_adaptive.inversion_config.stop_rule != "adaptive":
        raise InvalidInputError("expected one fixed-rule and one adaptive-rule profile")
    fixed = separation(profile_fixed, model, belongings, others, workers)
    adaptive = separation(profile_adaptive, model, belongings, others, workers)
    return {
        "acc_fixed": fixed["acc"],
        "acc_adaptive": adaptive["acc"],
        "mean_steps_fixed": fixed["mean_steps"],
        "mean_steps_adaptive": adaptive["mean_steps"],
    }


def efficiency(model, images, true_latents=None, rel_tol: float = 0.05, encoder_cfg=None, random_cfg=None) -> dict:
    """Convergence steps and initial latent distances for both start modes.

    Each mode runs with its own default step budget unless configs are given.
    """
    encoder_cfg = encoder_cfg or InversionConfig(init_mode="encoder")
    random_cfg = random_cfg or InversionConfig(init_mode="random")
    out = {}
    for name, cfg in (("encoder", encoder_cfg), ("random", random_cfg)):
        results = invert_many(model, images, cfg, true_latents=true_latents)
        ok = [r for r in results if not isinstance(r, Exception)]
        steps = [convergence_step(r, rel_tol) for r in ok]
        entry = {
            "max_steps": cfg.max_steps,
            "convergence_steps": steps,
            "median_convergence_step": float(np.median(steps)) if steps else math.nan,
            "initial_losses": [r.initial_loss for r in ok],
            "best_losses": [r.best_loss for r in ok],
            "failed": len(results) - len(ok),
        }
        if true_latents is not None:
            entry["init_distances"] = [r.init_distance_to for r in ok]
            entry["median_init_distance"] = float(np.median(entry["init_distances"]))
        out[name] = entry
    return out


def robustness_sweep(profile, model, belonging_set, other_set, specs, seed: int = 0, workers: int = 1) -> list:
    """One row per augmentation: accuracy and mean image-quality metrics.

    Quality metrics compare each original image with its augmented version,
    averaged over both sets. A failing cell is reported with an ``error``
    entry and NaN values; the sweep carries on.
    """
    belonging_set = np.asarray(belonging_set, dtype=np.float64)
    other_set = np.asarray(other_set, dtype=np.float64)
    if len(belonging_set) == 0 or len(other_set) == 0:
        raise InvalidInputError("both image sets must be nonempty")
    rows = []
    for spec in specs:
        row = {"augmentation": spec.kind, "parameter": spec.parameter}
        try:
            aug_b = augment_batch(belonging_set, spec, seed)
            aug_o = augment_batch(other_set, spec, seed + len(belonging_set))
            res = separation(profile, model, aug_b, aug_o, workers)
            q = [quality_metrics(x, y) for x, y in zip(np.concatenate([belonging_set, other_set]), np.concatenate([aug_b, aug_o]))]
            row["acc"] = res["acc"]
            for key in ("ssim", "psnr", "l1", "l2"):
                row[key] = float(np.mean([m[key] for m in q]))
        except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the sweep
            row.update({k: math.nan for k in ("acc", "ssim", "psnr", "l1", "l2")})
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_robustness_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROBUSTNESS_COLUMNS)
        for row in rows:
            writer.writerow([row["augmentation"], repr(row["parameter"])] + [repr(row[k]) for k in ROBUSTNESS_COLUMNS[2:]])


def noise_specs(stds=(0.01, 0.02, 0.03, 0.04, 0.05)):
    return [AugmentationSpec("gaussian_noise", s) for s in stds]


def with_stop_rule(cfg: InversionConfig, rule: str) -> InversionConfig:
    return replace(cfg, stop_rule=rule)
