"""Gradient-based latent inversion of a decoder.

Given an image ``x`` and a decoder ``D``, search for the latent ``a`` that
minimises ``mean((D(a) - x)**2)``. The search starts either from the
encoder projection of ``x`` or from a seeded standard-normal draw, and
uses Adam-style per-coordinate updates. Images in a batch are optimised
jointly but independently: each image's gradient only involves its own
loss, and the adaptive stopping rule is tracked per image.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidInputError, InversionDivergedError
from .models import Autoencoder, latent_rms_distance

INIT_MODES = ("encoder", "random")
STOP_RULES = ("fixed", "adaptive")
DEFAULT_MAX_STEPS = {"encoder": 100, "random": 400}

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class InversionConfig:
    init_mode: str = "encoder"
    learning_rate: float = 0.01
    max_steps: int | None = None
    stop_rule: str = "fixed"
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise InvalidInputError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.stop_rule not in STOP_RULES:
            raise InvalidInputError(f"stop_rule must be one of {STOP_RULES}, got {self.stop_rule!r}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise InvalidInputError(f"learning_rate must be finite and >= 0, got {self.learning_rate!r}")
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", DEFAULT_MAX_STEPS[self.init_mode])
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise InvalidInputError(f"max_steps must be a positive integer, got {self.max_steps!r}")
        if int(self.patience) != self.patience or self.patience < 1:
            raise InvalidInputError(f"patience must be a positive integer, got {self.patience!r}")
        object.__setattr__(self, "max_steps", int(self.max_steps))
        object.__setattr__(self, "patience", int(self.patience))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InversionConfig":
        known = {k: d[k] for k in ("init_mode", "learning_rate", "max_steps", "stop_rule", "patience", "seed") if k in d}
        return cls(**known)


@dataclass
class InversionResult:
    best_latent: np.ndarray
    best_loss: float
    final_loss: float
    loss_trajectory: list
    steps_run: int
    init_distance_to: float | None = None

    @property
    def initial_loss(self) -> float:
        return self.loss_trajectory[0]


def reconstruction_loss(x_hat, x) -> float:
    """Mean squared error over all pixels."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise InvalidInputError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    return float(np.mean((x_hat - x) ** 2))


def _random_latent(model: Autoencoder, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(model.latent_shape)


def initialize_latent(model: Autoencoder, x: np.ndarray, cfg: InversionConfig) -> np.ndarray:
    """Starting point: ``encode(x)`` or a seeded standard-normal draw."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.image_shape:
        raise InvalidInputError(f"image shape {x.shape} does not match model image shape {model.image_shape}")
    return _initial_batch(model, x[None], cfg)[0].double().numpy()


def _initial_batch(model, images: np.ndarray, cfg: InversionConfig) -> torch.Tensor:
    if cfg.init_mode == "encoder":
        with torch.no_grad():
            return model.encode(torch.as_tensor(images, dtype=model.dtype)).detach().clone()
    a0 = torch.as_tensor(_random_latent(model, cfg.seed), dtype=model.dtype)
    return a0.expand(len(images), *model.latent_shape).clone()


def _per_image_mse(model, a, x):
    return ((model.decode(a) - x) ** 2).flatten(1).mean(1)


def loss_and_gradient(model: Autoencoder, a, x):
    """Inversion objective at latent ``a`` for image ``x`` and its gradient in ``a``.

    This is the same computation the optimiser uses; it runs in the model's dtype.
    """
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a.shape != model.latent_shape or x.shape != model.image_shape:
        raise InvalidInputError(f"expected latent {model.latent_shape} and image {model.image_shape}, got {a.shape} and {x.shape}")
    at = torch.as_tensor(a, dtype=model.dtype)[None].requires_grad_(True)
    xt = torch.as_tensor(x, dtype=model.dtype)[None]
    loss = _per_image_mse(model, at, xt).sum()
    (grad,) = torch.autograd.grad(loss, at)
    return float(loss.detach()), grad[0].double().numpy()


def _invert_chunk(model, x: torch.Tensor, a: torch.Tensor, cfg: InversionConfig):
    """Run the optimiser on one chunk. Returns per-image dicts or errors."""
    n = x.shape[0]
    m = torch.zeros_like(a)
    v = torch.zeros_like(a)
    best_a = a.clone()
    best = [math.inf] * n
    stall = [0] * n
    traj: list[list[float]] = [[] for _ in range(n)]
    steps_run = [0] * n
    failed: dict[int, str] = {}
    active = list(range(n))

    for k in range(cfg.max_steps + 1):
        if not active:
            break
        idx = torch.as_tensor(active)
        need_grad = k < cfg.max_steps
        a_act = a[idx].detach().requires_grad_(need_grad)
        with torch.set_grad_enabled(need_grad):
            losses = _per_image_mse(model, a_act, x[idx])
            grad = torch.autograd.grad(losses.sum(), a_act)[0] if need_grad else None
        values = losses.detach().double().tolist()

        still = []
        improved_rows = []
        for row, (i, val) in enumerate(zip(active, values)):
            if not math.isfinite(val):
                failed[i] = f"non-finite loss at step {k}"
                continue
            traj[i].append(val)
            steps_run[i] = k
            if val < best[i]:
                best[i] = val
                stall[i] = 0
                improved_rows.append(row)
            else:
                stall[i] += 1
            if k == cfg.max_steps:
                continue
            if cfg.stop_rule == "adaptive" and k > 0 and stall[i] >= cfg.patience:
                continue
            still.append(row)

        if improved_rows:
            rows = torch.as_tensor(improved_rows)
            best_a[idx[rows]] = a_act.detach()[rows]
        if not still or not need_grad:
            active = []
            continue

        rows = torch.as_tensor(still)
        sel = idx[rows]
        g = grad[rows]
        # All images share the step counter, so bias correction uses k + 1.
        m[sel] = BETA1 * m[sel] + (1 - BETA1) * g
        v[sel] = BETA2 * v[sel] + (1 - BETA2) * g * g
        m_hat = m[sel] / (1 - BETA1 ** (k + 1))
        v_hat = v[sel] / (1 - BETA2 ** (k + 1))
        a[sel] = a_act.detach()[rows] - cfg.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS)
        active = [active[r] for r in still]

    out = []
    for i in range(n):
        if i in failed:
            out.append(InversionDivergedError(f"inversion diverged: {failed[i]}", traj[i]))
        else:
            out.append(
                {
                    "best_latent": best_a[i].double().numpy(),
                    "best_loss": best[i],
                    "final_loss": traj[i][-1],
                    "loss_trajectory": traj[i],
                    "steps_run": steps_run[i],
                }
            )
    return out


def invert_many(model: Autoencoder, images, cfg: InversionConfig, true_latents=None, chunk_size: int = 200):
    """Invert a stack of images. Failed images yield the exception object.

    The returned list is aligned with ``images``; entries are
    :class:`InversionResult` or :class:`InversionDivergedError`.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != model.image_shape:
        raise InvalidInputError(
            f"expected images of shape (N, {', '.join(map(str, model.image_shape))}), got {images.shape}"
        )
    if true_latents is not None:
        true_latents = np.asarray(true_latents, dtype=np.float64)
        if true_latents.shape != (len(images), *model.latent_shape):
            raise InvalidInputError(f"true_latents shape {true_latents.shape} does not match the images")
    results = []
    for start in range(0, len(images), chunk_size):
        chunk = images[start:start + chunk_size]
        x = torch.as_tensor(chunk, dtype=model.dtype)
        a0 = _initial_batch(model, chunk, cfg)
        init_np = a0.double().numpy()
        for j, item in enumerate(_invert_chunk(model, x, a0.clone(), cfg)):
            if isinstance(item, Exception):
                results.append(item)
                continue
            dist = None
            if true_latents is not None:
                dist = latent_rms_distance(init_np[j], true_latents[start + j])
            results.append(InversionResult(init_distance_to=dist, **item))
    return results


def invert_batch(model: Autoencoder, images, cfg: InversionConfig, true_latents=None, chunk_size: int = 200):
    """Like :func:`invert_many` but raises on the first diverged image."""
    results = invert_many(model, images, cfg, true_latents=true_latents, chunk_size=chunk_size)
    for i, r in enumerate(results):
        if isinstance(r, Exception):
            r.index = i
            raise r
    return results


def invert_latent(model: Autoencoder, x, cfg: InversionConfig, true_latent=None) -> InversionResult:
    """Invert one ``(C, H, W)`` image; see :func:`invert_many`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.image_shape:
        raise InvalidInputError(f"image shape {x.shape} does not match model image shape {model.image_shape}")
    tl = None if true_latent is None else np.asarray(true_latent)[None]
    result = invert_many(model, x[None], cfg, true_latents=tl)[0]
    if isinstance(result, Exception):
        raise result
    return result


def convergence_step(result: InversionResult, rel_tol: float) -> int:
    """First step whose loss is within ``(1 + rel_tol)`` of the best loss."""
    traj = result.loss_trajectory
    if not traj:
        raise InvalidInputError("empty loss trajectory")
    if rel_tol < 0:
        raise InvalidInputError(f"rel_tol must be >= 0, got {rel_tol!r}")
    target = (1.0 + rel_tol) * min(traj)
    for k, value in enumerate(traj):
        if value <= target:
            return k
    return len(traj) - 1


def write_trajectory_csv(result: InversionResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for k, value in enumerate(result.loss_trajectory):
            writer.writerow([k, repr(value)])
