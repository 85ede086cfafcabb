"""Command-line interface.

Subcommands: ``train``, ``calibrate``, ``attribute``, ``evaluate`` and
``robustness``. Exit codes: 0 success, 1 usage or configuration error,
2 runtime error, 3 partial failure (some images could not be processed).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .attribution import CalibrationProfile, Verdict, batch_attribute, calibrate_model
from .config import (
    ConfigError,
    config_hash,
    inversion_config,
    load_config,
    load_dataset,
    model_spec,
    robustness_specs,
    training_config,
)
from .data import cache_dir, load_png, synthetic_images
from .errors import InvalidInputError
from .experiments import (
    compare_stopping,
    efficiency,
    noise_specs,
    robustness_sweep,
    separation,
    with_stop_rule,
    write_robustness_csv,
)
from .augment import AugmentationSpec
from .inversion import InversionConfig
from .manifest import RunManifest
from .models import generate_belongings, load_checkpoint, save_checkpoint
from .training import train_autoencoder

log = logging.getLogger("decoder_attribution")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for runtime errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p, *, config=True, inversion=False, calibration=False):
    if config:
        p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--workers", type=int, help="parallel workers over image chunks")
    p.add_argument("--out", help="output location")
    if inversion:
        p.add_argument("--init", choices=("random", "encoder"), help="latent initialisation")
        p.add_argument("--steps", type=int, help="maximum inversion steps")
        p.add_argument("--lr", type=float, help="inversion learning rate")
        p.add_argument("--stop", choices=("fixed", "adaptive"), help="stopping rule")
    if calibration:
        p.add_argument("--n", type=int, help="number of calibration belongings (default 100)")
        p.add_argument("--alpha", type=float, help="significance level (default 0.05)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decoder-attribution", description="Attribute images to an autoencoder's decoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an autoencoder and write a checkpoint")
    _add_common(p)

    p = sub.add_parser("calibrate", help="fit the per-model loss threshold")
    p.add_argument("--model", required=True, help="checkpoint written by 'train'")
    _add_common(p, inversion=True, calibration=True)

    p = sub.add_parser("attribute", help="label images as belonging or non_belonging")
    p.add_argument("--profile", required=True, help="profile written by 'calibrate'")
    p.add_argument("--model", required=True, help="checkpoint the profile was calibrated on")
    p.add_argument("images", nargs="+", help="PNG files or folders of PNGs")
    _add_common(p, config=False)

    p = sub.add_parser("evaluate", help="two-model separation, stopping and efficiency report")
    _add_common(p, inversion=True, calibration=True)

    p = sub.add_parser("robustness", help="accuracy under post-processing augmentations")
    _add_common(p, inversion=True, calibration=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _effective_config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg["workers"] = args.workers
    if args.out is not None:
        cfg["out"] = args.out
    inv = cfg["inversion"]
    for flag, key in (("init", "init_mode"), ("steps", "max_steps"), ("lr", "learning_rate"), ("stop", "stop_rule")):
        value = getattr(args, flag, None)
        if value is not None:
            inv[key] = value
    for flag in ("n", "alpha"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg["calibration"][flag] = value
    return cfg


def _model_cache_key(cfg: dict, seed: int) -> str:
    return config_hash({"dataset": cfg["dataset"], "model": cfg["model"], "training": cfg["training"], "seed": seed})[:24]


def _trained_model(cfg: dict, seed: int):
    """Train (or fetch from the cache) the model described by ``cfg`` with ``seed``."""
    path = cache_dir() / "models" / f"{_model_cache_key(cfg, seed)}.npz"
    if path.exists():
        try:
            log.info("using cached model %s", path)
            return load_checkpoint(path)
        except InvalidInputError as exc:
            log.warning("ignoring unreadable cached model %s: %s", path, exc)
    splits = load_dataset(cfg)
    log.info("training %s model (seed %d) on %d images", cfg["model"]["kind"], seed, len(splits.train))
    model = train_autoencoder(splits.train, model_spec(cfg), training_config(cfg, seed), heldout=splits.heldout)
    save_checkpoint(model, path)
    return model


def _eval_pool(model, n: int, seed: int) -> np.ndarray:
    return synthetic_images(n, seed, model.image_shape)


def _calibrate_from_cfg(model, cfg: dict, inv: InversionConfig) -> CalibrationProfile:
    cal = cfg["calibration"]
    n = int(cal["n"])
    pool = _eval_pool(model, n, int(cal["pool_seed"])) if cal["source"] == "pool" else None
    profile = calibrate_model(model, n=n, alpha=float(cal["alpha"]), cfg=inv, seed=int(cfg["seed"]), source=cal["source"], pool=pool)
    if profile.summary.sigma == 0.0:
        print(f"warning: calibration losses have zero spread (sigma=0); threshold equals the mean loss {profile.summary.mu!r}", file=sys.stderr)
    return profile


def _models_for_evaluation(cfg: dict, manifest: RunManifest):
    ev = cfg["evaluation"]
    seed = int(cfg["seed"])
    with manifest.timed("models"):
        inspected = load_checkpoint(ev["inspected_checkpoint"]) if ev["inspected_checkpoint"] else _trained_model(cfg, seed)
        if ev["other_checkpoint"]:
            other = load_checkpoint(ev["other_checkpoint"])
        else:
            other_seed = ev["other_seed"] if ev["other_seed"] is not None else seed + 1
            other = _trained_model(cfg, int(other_seed))
    if other.model_id == inspected.model_id:
        raise InvalidInputError("the inspected and the other model are identical")
    if other.image_shape != inspected.image_shape:
        raise InvalidInputError("the inspected and the other model must share an image shape")
    return inspected, other


def _evaluation_sets(cfg: dict, inspected, other):
    ev = cfg["evaluation"]
    nb, no = int(ev["n_belonging"]), int(ev["n_other"])
    pool = _eval_pool(inspected, nb + no, int(ev["pool_seed"]))
    seed = int(ev["pool_seed"])
    belongings, latents = generate_belongings(inspected, nb, seed, source="pool", pool=pool[:nb])
    others = generate_belongings(other, no, seed, source="pool", pool=pool[nb:])[0]
    return belongings, latents, others


def _write_verdict_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set", "index", "label", "cost", "threshold", "steps_run"])
        for row in rows:
            writer.writerow(row)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(data), indent=2, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    out = Path(cfg["out"])
    manifest = RunManifest("train", copy.deepcopy(cfg), int(cfg["seed"]))
    with manifest.timed("data"):
        splits = load_dataset(cfg)
    with manifest.timed("train"):
        model = train_autoencoder(splits.train, model_spec(cfg), training_config(cfg), heldout=splits.heldout)
    ckpt = out / "model.npz"
    digest = save_checkpoint(model, ckpt)
    manifest.add_artifact(ckpt)
    manifest.add_artifact(out / "manifest.json")
    manifest.write(out / "manifest.json")
    report = model.training_report
    print(f"model {model.model_id} written to {ckpt}")
    if report.get("heldout_mse") is not None:
        print(f"heldout_mse={report['heldout_mse']!r}")
    print(f"content_hash={digest}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _effective_config(args)
    model = load_checkpoint(args.model)
    out = Path(args.out) if args.out else Path(args.model).with_name("profile.json")
    cfg["out"] = str(out)
    manifest = RunManifest("calibrate", {**copy.deepcopy(cfg), "model_path": str(args.model)}, int(cfg["seed"]))
    with manifest.timed("calibrate"):
        profile = _calibrate_from_cfg(model, cfg, inversion_config(cfg))
    profile.save(out)
    mpath = out.with_name(out.stem + ".manifest.json")
    manifest.add_artifact(out)
    manifest.add_artifact(mpath)
    manifest.write(mpath)
    s = profile.summary
    print(f"n={s.n} alpha={s.alpha!r} mu={s.mu!r} sigma={s.sigma!r} threshold={profile.threshold!r}")
    print(f"profile written to {out}")
    return EXIT_OK


def _expand_images(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(f for f in p.rglob("*") if f.suffix.lower() == ".png"))
        else:
            files.append(p)
    return files


def cmd_attribute(args) -> int:
    profile = CalibrationProfile.load(args.profile)
    model = load_checkpoint(args.model)
    if profile.model_id != model.model_id:
        raise InvalidInputError(f"profile {args.profile} belongs to {profile.model_id}, not {model.model_id}")
    files = _expand_images(args.images)
    if not files:
        raise InvalidInputError("no images given")
    out = Path(args.out) if args.out else Path("verdicts.csv")
    manifest = RunManifest(
        "attribute",
        {"profile": str(args.profile), "model": str(args.model), "images": [str(f) for f in files], "workers": args.workers or 1},
        int(profile.seed if args.seed is None else args.seed),
    )

    results: list = [None] * len(files)
    good, arrays = [], []
    with manifest.timed("load"):
        for i, f in enumerate(files):
            try:
                x = load_png(f, model.image_shape[0])
                if x.shape != model.image_shape:
                    raise InvalidInputError(f"image shape {x.shape} does not match model image shape {model.image_shape}")
            except Exception as exc:  # noqa: BLE001 - unreadable files become error rows
                results[i] = exc
                continue
            good.append(i)
            arrays.append(x)
    with manifest.timed("attribute"):
        verdicts = batch_attribute(profile, model, arrays, workers=args.workers or 1) if arrays else []
    for i, v in zip(good, verdicts):
        results[i] = v

    failures = 0
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "cost", "threshold", "steps_run", "error"])
        for f, r in zip(files, results):
            if isinstance(r, Verdict):
                print(f"{r.label} cost={r.cost!r} threshold={r.threshold!r} path={f}")
                writer.writerow([str(f), r.label, repr(r.cost), repr(r.threshold), r.steps_run, ""])
            else:
                failures += 1
                msg = f"{type(r).__name__}: {r}"
                print(f"error path={f} message={msg}")
                print(f"error: {f}: {msg}", file=sys.stderr)
                writer.writerow([str(f), "error", "", repr(profile.threshold), "", msg])
    mpath = out.with_name(out.stem + ".manifest.json")
    manifest.add_artifact(out)
    manifest.add_artifact(mpath)
    manifest.write(mpath)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _effective_config(args)
    out = Path(cfg["out"])
    ev = cfg["evaluation"]
    workers = int(cfg["workers"])
    manifest = RunManifest("evaluate", copy.deepcopy(cfg), int(cfg["seed"]))
    inspected, other = _models_for_evaluation(cfg, manifest)
    with manifest.timed("data"):
        belongings, latents, others = _evaluation_sets(cfg, inspected, other)

    inv = inversion_config(cfg)
    report = {
        "inspected_model": inspected.model_id,
        "other_model": other.model_id,
        "n_belonging": len(belongings),
        "n_other": len(others),
        "inversion": inv.to_dict(),
    }
    with manifest.timed("calibrate"):
        profile = _calibrate_from_cfg(inspected, cfg, inv)
    profile_path = out / "profile.json"
    profile.save(profile_path)
    manifest.add_artifact(profile_path)
    report["calibration"] = {
        "n": profile.summary.n, "alpha": profile.summary.alpha, "mu": profile.summary.mu,
        "sigma": profile.summary.sigma, "threshold": profile.threshold,
    }

    with manifest.timed("separation"):
        sep = separation(profile, inspected, belongings, others, workers)
    report["separation"] = {"acc": sep["acc"], "auroc": sep["auroc"], "confusion": sep["confusion"].to_dict(), "mean_steps": sep["mean_steps"]}
    rows = [("belonging", i, v.label, repr(v.cost), repr(v.threshold), v.steps_run) for i, v in enumerate(sep["verdicts_belonging"])]
    rows += [("other", i, v.label, repr(v.cost), repr(v.threshold), v.steps_run) for i, v in enumerate(sep["verdicts_other"])]
    _write_verdict_csv(out / "verdicts.csv", rows)
    manifest.add_artifact(out / "verdicts.csv")

    if ev["compare_random"]:
        # Equal step budget: the alternative start mode gets the same number of steps.
        alt_mode = "random" if inv.init_mode == "encoder" else "encoder"
        alt = InversionConfig(**{**inv.to_dict(), "init_mode": alt_mode})
        with manifest.timed("separation_alternative_init"):
            alt_profile = _calibrate_from_cfg(inspected, cfg, alt)
            alt_sep = separation(alt_profile, inspected, belongings, others, workers)
        report["separation_alternative_init"] = {
            "init_mode": alt_mode, "max_steps": alt.max_steps, "acc": alt_sep["acc"], "auroc": alt_sep["auroc"],
            "confusion": alt_sep["confusion"].to_dict(),
        }

    if ev["compare_stopping"]:
        fixed_cfg = with_stop_rule(inv, "fixed")
        adaptive_cfg = with_stop_rule(inv, "adaptive")
        with manifest.timed("stopping"):
            p_fixed = profile if inv.stop_rule == "fixed" else _calibrate_from_cfg(inspected, cfg, fixed_cfg)
            p_adaptive = profile if inv.stop_rule == "adaptive" else _calibrate_from_cfg(inspected, cfg, adaptive_cfg)
            report["stopping"] = compare_stopping(p_fixed, p_adaptive, inspected, belongings, others, workers)

    n_eff = min(int(ev["efficiency_samples"]), len(belongings))
    if n_eff > 0:
        with manifest.timed("efficiency"):
            eff = efficiency(inspected, belongings[:n_eff], latents[:n_eff])
        report["efficiency"] = {
            mode: {k: entry[k] for k in ("max_steps", "median_convergence_step", "median_init_distance", "failed")}
            for mode, entry in eff.items()
        }

    specs = robustness_specs(cfg)
    if specs:
        with manifest.timed("robustness"):
            table = robustness_sweep(profile, inspected, belongings, others, specs, seed=int(cfg["seed"]), workers=workers)
        write_robustness_csv(table, out / "robustness.csv")
        manifest.add_artifact(out / "robustness.csv")
        report["robustness"] = table

    _write_json(out / "report.json", report)
    manifest.add_artifact(out / "report.json")
    manifest.add_artifact(out / "manifest.json")
    manifest.write(out / "manifest.json")

    print(f"acc={sep['acc']!r} auroc={sep['auroc']!r}")
    if "separation_alternative_init" in report:
        a = report["separation_alternative_init"]
        print(f"{a['init_mode']}-init acc={a['acc']!r} auroc={a['auroc']!r}")
    if "stopping" in report:
        s = report["stopping"]
        print(f"stopping acc_fixed={s['acc_fixed']!r} acc_adaptive={s['acc_adaptive']!r} "
              f"mean_steps_fixed={s['mean_steps_fixed']!r} mean_steps_adaptive={s['mean_steps_adaptive']!r}")
    for mode, entry in report.get("efficiency", {}).items():
        print(f"efficiency {mode}: median_convergence_step={entry['median_convergence_step']!r}")
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def _default_robustness_specs():
    return [AugmentationSpec("brightness", 1.0), AugmentationSpec("gaussian_noise", 0.0)] + noise_specs()


def cmd_robustness(args) -> int:
    cfg = _effective_config(args)
    out = Path(cfg["out"])
    manifest = RunManifest("robustness", copy.deepcopy(cfg), int(cfg["seed"]))
    specs = robustness_specs(cfg) or _default_robustness_specs()
    inspected, other = _models_for_evaluation(cfg, manifest)
    with manifest.timed("data"):
        belongings, _, others = _evaluation_sets(cfg, inspected, other)
    with manifest.timed("calibrate"):
        profile = _calibrate_from_cfg(inspected, cfg, inversion_config(cfg))
    with manifest.timed("robustness"):
        table = robustness_sweep(profile, inspected, belongings, others, specs, seed=int(cfg["seed"]), workers=int(cfg["workers"]))
    write_robustness_csv(table, out / "robustness.csv")
    manifest.add_artifact(out / "robustness.csv")
    manifest.add_artifact(out / "manifest.json")
    manifest.write(out / "manifest.json")
    failed = 0
    for row in table:
        if "error" in row:
            failed += 1
            print(f"error {row['augmentation']} {row['parameter']!r}: {row['error']}", file=sys.stderr)
        else:
            print(f"{row['augmentation']} {row['parameter']!r} acc={row['acc']!r} ssim={row['ssim']!r} psnr={row['psnr']!r}")
    print(f"robustness table written to {out / 'robustness.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "robustness": cmd_robustness,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level guard maps failures to an exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
