"""Acceptance suite: one test per criterion, each at its stated tolerance.

Trained models are cached under ``~/.cache/decoder_attribution/acceptance``
(override with ``$DECODER_ATTRIBUTION_ACCEPTANCE_CACHE``); training is
deterministic, so a cached model is identical to a freshly trained one.
Delete the cache directory to time a cold run.
"""

import copy
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from decoder_attribution.attribution import batch_attribute, calibrate_model
from decoder_attribution.augment import AugmentationSpec
from decoder_attribution.data import split_dataset, synthetic_images
from decoder_attribution.experiments import compare_stopping, efficiency, noise_specs, robustness_sweep, separation, with_stop_rule
from decoder_attribution.grubbs import CalibrationSummary, critical_value, grubbs_threshold, student_t_cdf
from decoder_attribution.inversion import InversionConfig, convergence_step, invert_many, loss_and_gradient
from decoder_attribution.metrics import ConfusionCounts, auroc, ssim
from decoder_attribution.models import LinearAutoencoder, decode, encode, generate_belongings, load_checkpoint, save_checkpoint
from decoder_attribution.training import ModelSpec, TrainingConfig, train_autoencoder

from conftest import record_criterion
from oracles import grubbs_bound, t_cdf, t_critical

pytestmark = pytest.mark.slow

SHAPE = (3, 32, 32)
N_CAL = 100
ALPHA = 0.05
CAL_POOL_SEED = 2000
EVAL_POOL_SEED = 1000
LATENT_POOL_SEED = 3000
TRAIN_CFG = dict(epochs=30, batch_size=64, learning_rate=2e-3)

_train_seconds = {}


def _cache_root() -> Path:
    root = os.environ.get("DECODER_ATTRIBUTION_ACCEPTANCE_CACHE")
    path = Path(root) if root else Path.home() / ".cache" / "decoder_attribution" / "acceptance"
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="module")
def training_split():
    train, heldout = split_dataset(synthetic_images(2000, 0, SHAPE), [0.9, 0.1], seed=0)
    return train, heldout


def _model(kind, seed, split):
    spec = ModelSpec(kind=kind, image_shape=SHAPE)
    cfg = TrainingConfig(seed=seed, **TRAIN_CFG)
    key = hashlib.sha256(json.dumps({"spec": spec.to_dict(), "cfg": cfg.to_dict(), "data": "synthetic-2000-0-split-0.9"}, sort_keys=True).encode()).hexdigest()[:20]
    path = _cache_root() / f"{kind}-{seed}-{key}.npz"
    if path.exists():
        _train_seconds[(kind, seed)] = 0.0
        return load_checkpoint(path)
    start = time.perf_counter()
    model = train_autoencoder(split[0], spec, cfg, heldout=split[1])
    _train_seconds[(kind, seed)] = time.perf_counter() - start
    save_checkpoint(model, path)
    return model


@pytest.fixture(scope="module")
def vae_a(training_split):
    return _model("continuous", 1, training_split)


@pytest.fixture(scope="module")
def vae_b(training_split):
    return _model("continuous", 2, training_split)


@pytest.fixture(scope="module")
def vq_a(training_split):
    return _model("quantized", 1, training_split)


@pytest.fixture(scope="module")
def vq_b(training_split):
    return _model("quantized", 2, training_split)


def _eval_sets(model_a, model_b):
    """200 belongings of A and 200 outputs of B, from disjoint pool images."""
    pool = synthetic_images(400, EVAL_POOL_SEED, SHAPE)
    bel = generate_belongings(model_a, 200, EVAL_POOL_SEED, pool=pool[:200])[0]
    oth = generate_belongings(model_b, 200, EVAL_POOL_SEED, pool=pool[200:])[0]
    return bel, oth


def _calibrate(model, cfg):
    pool = synthetic_images(N_CAL, CAL_POOL_SEED, SHAPE)
    return calibrate_model(model, n=N_CAL, alpha=ALPHA, cfg=cfg, pool=pool)


def _separation_experiment(model_a, model_b):
    start = time.perf_counter()
    bel, oth = _eval_sets(model_a, model_b)
    enc_cfg = InversionConfig(init_mode="encoder")
    # Equal step budget for the comparison pipeline.
    rnd_cfg = InversionConfig(init_mode="random", max_steps=enc_cfg.max_steps)
    enc_profile = _calibrate(model_a, enc_cfg)
    enc = separation(enc_profile, model_a, bel, oth)
    rnd = separation(_calibrate(model_a, rnd_cfg), model_a, bel, oth)
    return {"bel": bel, "oth": oth, "profile": enc_profile, "enc": enc, "rnd": rnd, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="module")
def vae_experiment(vae_a, vae_b):
    return _separation_experiment(vae_a, vae_b)


@pytest.fixture(scope="module")
def vq_experiment(vq_a, vq_b):
    return _separation_experiment(vq_a, vq_b)


def _fd_max_rel_error(model, a, x, n_coords, seed, eps=1e-6):
    _, grad = loss_and_gradient(model, a, x)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in rng.choice(a.size, size=n_coords, replace=False):
        idx = np.unravel_index(c, a.shape)
        ap, am = a.copy(), a.copy()
        ap[idx] += eps
        am[idx] -= eps
        fd = (loss_and_gradient(model, ap, x)[0] - loss_and_gradient(model, am, x)[0]) / (2 * eps)
        worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), 1e-12))
    return worst


# ---------------------------------------------------------------------------


def test_criterion_1_statistics_oracle():
    nus = [1, 2, 5, 10, 30, 98, 100]
    grid = np.linspace(-5, 5, 101)
    alphas = [0.1, 0.05, 0.01, 0.0005]
    start = time.perf_counter()
    ours_cdf = {(nu, t): student_t_cdf(float(t), nu) for nu in nus for t in grid}
    ours_crit = {(a, nu): critical_value(a, nu) for a in alphas for nu in nus}
    elapsed = time.perf_counter() - start
    cdf_err = max(abs(v - t_cdf(float(t), nu)) for (nu, t), v in ours_cdf.items())
    crit_err = max(abs(v - t_critical(a, nu)) for (a, nu), v in ours_crit.items())
    ok = cdf_err <= 1e-8 and crit_err <= 1e-4 and elapsed < 10.0
    record_criterion(1, ok, f"max cdf err {cdf_err:.2e} (<=1e-8), max critical err {crit_err:.2e} (<=1e-4), runtime {elapsed:.2f}s (<10s)")
    assert ok


def test_criterion_2_grubbs_threshold():
    zero_ok = all(grubbs_threshold(CalibrationSummary(n=100, mu=mu, sigma=0.0)) == mu for mu in (0.0, 0.37, 1e-6, -2.5))
    unit = grubbs_threshold(CalibrationSummary(n=100, mu=0.0, sigma=1.0, alpha=0.05))
    oracle = grubbs_bound(100, 0.05, 0.0, 1.0)
    sigmas = np.linspace(0.0, 5.0, 51)
    mus = np.linspace(-5.0, 5.0, 51)
    by_sigma = [grubbs_threshold(CalibrationSummary(n=100, mu=0.3, sigma=float(s))) for s in sigmas]
    by_mu = [grubbs_threshold(CalibrationSummary(n=100, mu=float(m), sigma=0.7)) for m in mus]
    monotone = bool(np.all(np.diff(by_sigma) > 0) and np.all(np.diff(by_mu) > 0))
    ok = zero_ok and abs(unit - oracle) <= 1e-6 and monotone
    record_criterion(2, ok, f"sigma=0 gives mu: {zero_ok}; unit threshold {unit:.10f} vs oracle {oracle:.10f}; strictly increasing: {monotone}")
    assert ok


def test_criterion_3_gradients(vae_a, vq_a, training_split):
    heldout = training_split[1]
    vae64 = copy.deepcopy(vae_a).double()
    vq64 = copy.deepcopy(vq_a).double()
    errs = {
        "vae": _fd_max_rel_error(vae64, encode(vae64, heldout[1]), heldout[0], 24, seed=0),
        "quantized": _fd_max_rel_error(vq64, encode(vq64, heldout[3]), heldout[2], 24, seed=1),
    }
    linear = LinearAutoencoder(SHAPE, latent_dim=64, seed=0, exact=True)
    errs["linear"] = _fd_max_rel_error(linear, np.random.default_rng(0).uniform(0, 1, 64), heldout[4], 24, seed=2)
    dense = LinearAutoencoder(SHAPE, latent_dim=64, seed=1, exact=False)
    errs["linear_dense"] = _fd_max_rel_error(dense, np.random.default_rng(1).standard_normal(64), heldout[5], 24, seed=3)
    ok = all(e <= 1e-3 for e in errs.values())
    record_criterion(3, ok, "max relative FD error on 24 coords: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


def test_criterion_4_exact_inverse():
    model = LinearAutoencoder(SHAPE, latent_dim=64, seed=0, exact=True)
    cfg = InversionConfig(init_mode="encoder")
    rng = np.random.default_rng(0)
    outputs = np.stack([decode(model, rng.uniform(0, 1, 64)) for _ in range(200)])
    results = invert_many(model, outputs, cfg)
    zero_at_start = all(r.loss_trajectory[0] == 0.0 for r in results)
    profile = calibrate_model(model, n=N_CAL, alpha=ALPHA, cfg=cfg)
    degenerate = profile.summary.sigma == 0.0 and profile.threshold == 0.0
    bel_ok = all(v.label == "belonging" for v in batch_attribute(profile, model, outputs))
    noisy_ok = True
    for std in (0.05, 0.1):
        noisy = np.clip(outputs + np.random.default_rng(int(std * 100)).normal(0, std, outputs.shape), 0, 1)
        noisy_ok &= all(v.label == "non_belonging" for v in batch_attribute(profile, model, noisy))
    ok = zero_at_start and degenerate and bel_ok and noisy_ok
    record_criterion(4, ok, f"step-0 loss 0 for 200/200: {zero_at_start}; threshold 0: {degenerate}; outputs accepted: {bel_ok}; noisy (std 0.05, 0.1) rejected: {noisy_ok}")
    assert ok


def test_criterion_5_separation(vae_experiment):
    enc, rnd = vae_experiment["enc"], vae_experiment["rnd"]
    train = _train_seconds.get(("continuous", 1), 0.0) + _train_seconds.get(("continuous", 2), 0.0)
    total = train + vae_experiment["seconds"]
    ok = (
        enc["acc"] >= 0.90
        and enc["auroc"] >= 0.95
        and enc["acc"] > rnd["acc"]
        and enc["auroc"] > rnd["auroc"]
        and total <= 1800
    )
    record_criterion(
        5, ok,
        f"encoder-init Acc {enc['acc']:.4f} AUROC {enc['auroc']:.4f}; random-init (same 100 steps) Acc {rnd['acc']:.4f} AUROC {rnd['auroc']:.4f}; "
        f"runtime {total:.0f}s incl. {train:.0f}s training",
    )
    assert ok


def test_criterion_6_initialization(vae_a):
    pool = synthetic_images(100, LATENT_POOL_SEED, SHAPE)
    images, latents = generate_belongings(vae_a, 100, LATENT_POOL_SEED, pool=pool)
    eff = efficiency(vae_a, images, latents, rel_tol=0.05)
    d_enc = np.array(eff["encoder"]["init_distances"])
    d_rnd = np.array(eff["random"]["init_distances"])
    frac_closer = float(np.mean(d_enc < d_rnd))
    med_enc = eff["encoder"]["median_convergence_step"]
    med_rnd = eff["random"]["median_convergence_step"]
    ok = frac_closer >= 0.99 and med_enc <= 0.25 * med_rnd
    record_criterion(
        6, ok,
        f"encoder init closer for {frac_closer:.2%} (>=99%), median init dist {np.median(d_enc):.3f} vs {np.median(d_rnd):.3f}; "
        f"median convergence step {med_enc:.0f} ({eff['encoder']['max_steps']} budget) vs {med_rnd:.0f} ({eff['random']['max_steps']} budget), ratio {med_enc / med_rnd:.3f} (<=0.25)",
    )
    assert ok


def test_criterion_7_acceptance_rate(vae_experiment):
    counts = vae_experiment["enc"]["confusion"]
    rate = counts.tp / (counts.tp + counts.fn)
    ok = rate >= 0.90 and counts.tp + counts.fn == 200 and vae_experiment["profile"].summary.n == N_CAL
    record_criterion(7, ok, f"held-out belongings accepted {counts.tp}/{counts.tp + counts.fn} = {rate:.3f} (>=0.90) at alpha={ALPHA}, N={N_CAL}")
    assert ok


def test_criterion_8_stopping(vae_a, vae_experiment):
    fixed = vae_experiment["profile"]
    adaptive = _calibrate(vae_a, with_stop_rule(fixed.inversion_config, "adaptive"))
    res = compare_stopping(fixed, adaptive, vae_a, vae_experiment["bel"], vae_experiment["oth"])
    diff = abs(res["acc_fixed"] - res["acc_adaptive"])
    ok = diff <= 0.02 and res["mean_steps_adaptive"] < res["mean_steps_fixed"]
    record_criterion(
        8, ok,
        f"Acc fixed {res['acc_fixed']:.4f} vs adaptive {res['acc_adaptive']:.4f} (|diff| {diff:.4f} <= 0.02); "
        f"mean steps {res['mean_steps_fixed']:.2f} vs {res['mean_steps_adaptive']:.2f}",
    )
    assert ok


def test_criterion_9_noise_robustness(vae_a, vae_experiment):
    specs = [AugmentationSpec("brightness", 1.0), AugmentationSpec("gaussian_noise", 0.0)] + noise_specs((0.01, 0.02, 0.03, 0.04, 0.05))
    rows = robustness_sweep(vae_experiment["profile"], vae_a, vae_experiment["bel"], vae_experiment["oth"], specs)
    base = vae_experiment["enc"]["acc"]
    identity_ok = rows[0]["acc"] == base and rows[1]["acc"] == base
    accs = [r["acc"] for r in rows[2:]]
    trend_ok = all(b <= a + 0.02 for a, b in zip(accs, accs[1:])) and not any(math.isnan(a) for a in accs)
    ok = identity_ok and trend_ok
    record_criterion(9, ok, f"identity rows {rows[0]['acc']:.4f}/{rows[1]['acc']:.4f} vs base {base:.4f}; noise std 0.01..0.05 Acc {[round(a, 4) for a in accs]}")
    assert ok


def test_criterion_10_metrics_and_kinds(vq_experiment, vae_experiment):
    acc_ref = round(ConfusionCounts(480, 53, 20, 447).accuracy, 3) == 0.927
    rng = np.random.default_rng(0)
    auroc_ok = True
    for _ in range(5):
        b, o = rng.normal(size=20), rng.normal(0.3, 1, size=20)
        brute = sum((y > x) + 0.5 * (y == x) for x in b for y in o) / 400
        auroc_ok &= abs(auroc(b, o) - brute) <= 1e-12
    x = rng.uniform(size=SHAPE)
    ssim_ok = abs(ssim(x, x) - 1.0) <= 1e-12
    kinds = {}
    for name, exp in (("continuous", vae_experiment), ("quantized", vq_experiment)):
        enc, rnd = exp["enc"], exp["rnd"]
        kinds[name] = (enc["acc"], enc["auroc"], enc["acc"] >= 0.90 and enc["auroc"] >= 0.95 and enc["acc"] > rnd["acc"] and enc["auroc"] > rnd["auroc"])
    ok = acc_ref and auroc_ok and ssim_ok and all(v[2] for v in kinds.values())
    record_criterion(
        10, ok,
        f"confusion 0.927: {acc_ref}; AUROC vs enumeration: {auroc_ok}; SSIM(x,x)=1: {ssim_ok}; "
        + "; ".join(f"{k} Acc {v[0]:.4f} AUROC {v[1]:.4f}" for k, v in kinds.items())
        + " (quantized gradients checked in criterion 3)",
    )
    assert ok
