"""Gradient-norm penalties (FP, GP, GPr, GPx), mixup, and the per-step gradient.

Penalty gradients are finite-difference compositions of first-order
gradients: for the parameter-gradient penalties |g_hat|^2 the gradient is
2 H g_hat, and for GPx a directional difference along the input gradient.
Sampled labels are frozen across every evaluation that makes up one penalty
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ParamVector
from .curvature import HvpConfig, draw_categorical, hvp_fd
from .datasets import Batch
from .nets import ModelOracle, ModelSpec, forward_logits, softmax, value_and_input_grad

KINDS = ("None", "FP", "GP", "GPr", "GPx", "Mixup")
PENALTY_KINDS = ("FP", "GP", "GPr", "GPx")
LABEL_SOURCES = ("ModelDist", "Uniform", "True")

# Label source used by each parameter-gradient penalty.
_SOURCE = {"FP": "ModelDist", "GP": "True", "GPr": "Uniform"}

MIXUP_BETAS = (0.2, 0.4, 0.8, 1.6, 3.2, 6.4)
DEFAULT_ALPHA_CENTER = 0.01


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "None"
    alpha: float = 0.0
    start_epoch: int = 0
    refresh_every: int = 10
    mixup_beta: float = 1.0
    exact_single_example: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.start_epoch < 0:
            raise ValueError("start epoch must be non-negative")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if not self.mixup_beta > 0:
            raise ValueError("mixup beta must be positive")
        if self.exact_single_example and self.kind != "FP":
            raise ValueError("exact_single_example only applies to FP")

    @property
    def is_penalty(self) -> bool:
        return self.kind in PENALTY_KINDS

    def penalty_active(self, epoch: int) -> bool:
        # alpha == 0 is treated as "off" so that no extra work or logging happens
        return self.is_penalty and self.alpha > 0 and epoch >= self.start_epoch


def alpha_grid(center: float = DEFAULT_ALPHA_CENTER, n: int = 10) -> np.ndarray:
    """n log-spaced coefficients from 0.1 * center to 10 * center."""
    return np.logspace(np.log10(0.1 * center), np.log10(10.0 * center), n)


@dataclass(frozen=True)
class PenaltyCache:
    grad: ParamVector | None = None
    step: int = -1
    value: float = float("nan")

    def stale(self, step: int, refresh_every: int) -> bool:
        return self.grad is None or step % refresh_every == 0 or step - self.step >= refresh_every


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def sample_labels(logits, source: str, true_labels=None, seed=0) -> np.ndarray:
    """Labels from the model softmax, uniformly over classes, or the true ones.

    ModelDist and Uniform share one inverse-CDF path, so at all-zero logits
    the two sources give identical draws for the same seed.
    """
    if source == "True":
        if true_labels is None:
            raise ValueError("true labels required")
        return np.asarray(true_labels, dtype=np.int64).copy()
    z = np.asarray(logits, dtype=np.float64)
    if source == "ModelDist":
        probs = softmax(z)
    elif source == "Uniform":
        probs = np.full(z.shape, 1.0) / z.shape[1]
    else:
        raise ValueError(f"unknown label source {source!r}")
    rng = np.random.default_rng(seed)
    return draw_categorical(probs, rng.random(z.shape[0]))


def penalty_labels(spec: ModelSpec, theta: ParamVector, batch: Batch, cfg: RegularizerConfig, seed) -> np.ndarray:
    """Frozen labels for FP / GP / GPr at the current parameters."""
    if cfg.kind not in _SOURCE:
        raise ValueError(f"{cfg.kind} does not use sampled labels")
    source = _SOURCE[cfg.kind]
    logits = None if source == "True" else forward_logits(spec, theta, batch.inputs)
    return sample_labels(logits, source, batch.labels, seed)


def _penalty_oracle(spec, batch, cfg, labels) -> ModelOracle:
    if cfg.exact_single_example:
        return ModelOracle(spec, batch.inputs[:1], labels[:1])
    return ModelOracle(spec, batch.inputs, labels)


# ---------------------------------------------------------------------------
# Penalties
# ---------------------------------------------------------------------------


def penalty_value(spec, theta, batch: Batch, cfg: RegularizerConfig, seed=0, labels=None) -> float:
    """Unscaled penalty (alpha not applied)."""
    if not cfg.is_penalty:
        raise ValueError(f"{cfg.kind} has no additive penalty")
    if cfg.kind == "GPx":
        _, gx = value_and_input_grad(spec, theta, batch.inputs, batch.labels)
        flat = gx.reshape(len(gx), -1)
        return float(np.mean(np.einsum("ij,ij->i", flat, flat)))
    if labels is None:
        labels = penalty_labels(spec, theta, batch, cfg, seed)
    _, g = _penalty_oracle(spec, batch, cfg, labels)(theta)
    return float(np.dot(g.data, g.data))


def penalty_grad(
    spec, theta, batch: Batch, cfg: RegularizerConfig, seed=0, hvp_cfg: HvpConfig = HvpConfig(), labels=None
) -> ParamVector:
    """Gradient of the unscaled penalty with respect to theta."""
    return penalty_grad_and_value(spec, theta, batch, cfg, seed, hvp_cfg, labels)[0]


def penalty_grad_and_value(
    spec, theta, batch: Batch, cfg: RegularizerConfig, seed=0, hvp_cfg: HvpConfig = HvpConfig(), labels=None
) -> tuple[ParamVector, float]:
    if not cfg.is_penalty:
        raise ValueError(f"{cfg.kind} has no additive penalty")
    if cfg.kind == "GPx":
        return _gpx_grad(spec, theta, batch, hvp_cfg)
    if labels is None:
        labels = penalty_labels(spec, theta, batch, cfg, seed)
    oracle = _penalty_oracle(spec, batch, cfg, labels)
    _, g = oracle(theta)
    value = float(np.dot(g.data, g.data))
    if value == 0.0:
        return ParamVector.zeros(theta.layout), 0.0
    hv = hvp_fd(oracle, theta, g, hvp_cfg)
    return theta.with_data(2.0 * hv.data), value


def _gpx_grad(spec, theta, batch, hvp_cfg) -> tuple[ParamVector, float]:
    x = np.asarray(batch.inputs, dtype=np.float64)
    n = len(x)
    _, gx = value_and_input_grad(spec, theta, x, batch.labels)
    flat_c = gx.reshape(n, -1)
    sq = np.einsum("ij,ij->i", flat_c, flat_c)
    value = float(np.mean(sq))
    live = sq > 0
    if not np.any(live):
        return ParamVector.zeros(theta.layout), value
    c_norm = np.sqrt(sq[live])
    x_norm = np.linalg.norm(x.reshape(n, -1)[live], axis=1)
    eps = hvp_cfg.c * (1.0 + x_norm) / c_norm
    shape = (-1,) + (1,) * (x.ndim - 1)
    x_live, c_live = x[live], gx[live]
    weights = 1.0 / (n * eps)
    labels = np.asarray(batch.labels)[live]
    _, g_plus = ModelOracle(spec, x_live + eps.reshape(shape) * c_live, labels, weights)(theta)
    _, g_minus = ModelOracle(spec, x_live - eps.reshape(shape) * c_live, labels, weights)(theta)
    return theta.with_data(g_plus.data - g_minus.data), value


# ---------------------------------------------------------------------------
# Mixup
# ---------------------------------------------------------------------------


def mixup_batch(batch: Batch, beta: float, seed=0, n_classes: int | None = None, lam: float | None = None) -> Batch:
    """Convex combination of each example with a seeded random partner.

    One mixing weight per batch, drawn from Beta(beta, beta) unless ``lam``
    forces it.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    n = len(batch)
    if n < 2:
        raise ValueError("mixup needs at least two examples")
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = float(rng.beta(beta, beta))
    partner = rng.permutation(n)
    if batch.soft_labels is not None:
        targets = batch.soft_labels
    else:
        if n_classes is None:
            n_classes = int(np.max(batch.labels)) + 1
        targets = np.eye(n_classes)[batch.labels]
    inputs = lam * batch.inputs + (1.0 - lam) * batch.inputs[partner]
    soft = lam * targets + (1.0 - lam) * targets[partner]
    return replace(batch, inputs=inputs, soft_labels=soft)


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------


def regularized_step_grad(
    spec: ModelSpec,
    theta: ParamVector,
    batch: Batch,
    cfg: RegularizerConfig,
    cache: PenaltyCache,
    epoch: int,
    step: int,
    penalty_seed=0,
    mixup_seed=0,
    hvp_cfg: HvpConfig = HvpConfig(),
) -> tuple[ParamVector, float | None, PenaltyCache]:
    """Gradient used by the optimizer at this step.

    Returns (grad, penalty value behind the cached gradient or None,
    updated cache). Seeds are consumed only when the matching
    feature is active. Single-example batches skip mixup.
    """
    train_batch = batch
    if cfg.kind == "Mixup" and len(batch) >= 2:
        train_batch = mixup_batch(batch, cfg.mixup_beta, mixup_seed, n_classes=spec.n_classes)
    _, grad = ModelOracle(spec, train_batch.inputs, train_batch.targets)(theta)
    if not cfg.penalty_active(epoch):
        return grad, None, cache
    if cache.stale(step, cfg.refresh_every):
        pgrad, value = penalty_grad_and_value(spec, theta, batch, cfg, penalty_seed, hvp_cfg)
        cache = PenaltyCache(pgrad, step, value)
    total = grad.data + cfg.alpha * cache.grad.data
    return theta.with_data(total), cache.value, cache
