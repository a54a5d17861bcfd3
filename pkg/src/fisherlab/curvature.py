"""Curvature probes: Fisher traces, Hessian traces and their exact oracles.

Second-order quantities are central finite differences of first-order
gradients; the autodiff core stays first-order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradOracle, ParamVector, check_finite
from .nets import ModelOracle, ModelSpec, forward_logits, softmax

KINDS = ("TrF", "TrF_minibatch", "TrH_hutchinson", "TrH_exact", "TrF_exact", "EmpiricalFisher")

HUTCHINSON_M = 30


@dataclass(frozen=True)
class CurvatureEstimate:
    kind: str
    value: float
    n_samples: int
    std_error: float = 0.0

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class HvpConfig:
    c: float = 1e-4

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("relative step must be positive")


def draw_categorical(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw; ``uniforms`` has one entry per row (or rows x draws)."""
    cdf = np.cumsum(probs, axis=1)
    n_classes = probs.shape[1]
    if uniforms.ndim == 1:
        labels = (uniforms[:, None] >= cdf).sum(axis=1)
    else:
        labels = (uniforms[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(labels, n_classes - 1)


def sample_model_labels(spec: ModelSpec, theta: ParamVector, inputs, seed) -> np.ndarray:
    """One label per example drawn from the model's predictive distribution."""
    probs = softmax(forward_logits(spec, theta, inputs))
    rng = np.random.default_rng(seed)
    return draw_categorical(probs, rng.random(probs.shape[0]))


def _mean_and_se(terms: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(terms))
    if terms.size < 2:
        return mean, float("inf")
    return mean, float(np.std(terms, ddof=1) / np.sqrt(terms.size))


def per_example_sq_norms(spec, theta, inputs, labels, chunk: int = 512) -> np.ndarray:
    """Squared norms of per-example parameter gradients, in row order."""
    n = len(inputs)
    out = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        rows = ModelOracle(spec, inputs[start:stop], labels[start:stop]).per_example(theta)
        out[start:stop] = np.einsum("ij,ij->i", rows, rows)
    return out


# ---------------------------------------------------------------------------
# Hessian probes
# ---------------------------------------------------------------------------


def hvp_fd(oracle: GradOracle, theta: ParamVector, v: ParamVector, cfg: HvpConfig = HvpConfig()) -> ParamVector:
    """H v from (g(theta + eps v) - g(theta - eps v)) / (2 eps).

    eps = c * (1 + |theta|) / |v|, so the step taken in parameter space has
    length c * (1 + |theta|) whatever the scale of v.
    """
    theta.check_layout(v)
    v_norm = v.norm()
    if v_norm == 0.0:
        raise ValueError("direction has zero norm")
    eps = cfg.c * (1.0 + theta.norm()) / v_norm
    _, g_plus = oracle(theta.with_data(theta.data + eps * v.data))
    _, g_minus = oracle(theta.with_data(theta.data - eps * v.data))
    hv = (g_plus.data - g_minus.data) / (2.0 * eps)
    return theta.with_data(check_finite(hv, "Hessian-vector product"))


def tr_h_hutchinson(
    oracle: GradOracle,
    theta: ParamVector,
    M: int = HUTCHINSON_M,
    seed: int = 0,
    cfg: HvpConfig = HvpConfig(),
) -> CurvatureEstimate:
    """Hutchinson estimate mean_m z_m^T H z_m with standard Gaussian z_m."""
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(seed)
    terms = np.empty(M)
    for m in range(M):
        z = rng.standard_normal(theta.data.size)
        terms[m] = np.dot(z, hvp_fd(oracle, theta, theta.with_data(z), cfg).data)
    value, se = _mean_and_se(terms)
    return CurvatureEstimate("TrH_hutchinson", value, M, se)


def tr_h_exact_small(
    oracle: GradOracle,
    theta: ParamVector,
    cfg: HvpConfig = HvpConfig(),
    cap: int = 2000,
    order=None,
) -> CurvatureEstimate:
    """Sum of e_i^T H e_i over the basis; the sum always runs in index order."""
    p = theta.data.size
    if p > cap:
        raise ValueError(f"{p} parameters exceeds the exact-trace cap of {cap}")
    diag = np.empty(p)
    basis = np.zeros(p)
    for i in range(p) if order is None else order:
        basis[i] = 1.0
        diag[i] = hvp_fd(oracle, theta, theta.with_data(basis), cfg).data[i]
        basis[i] = 0.0
    return CurvatureEstimate("TrH_exact", float(np.sum(diag)), p, 0.0)


def hessian_fd(oracle: GradOracle, theta: ParamVector, step: float = 1e-5) -> np.ndarray:
    """Full Hessian by column-wise central differences of the gradient (symmetrized)."""
    p = theta.data.size
    out = np.empty((p, p))
    work = theta.data.copy()
    for i in range(p):
        orig = work[i]
        work[i] = orig + step
        _, gp = oracle(theta.with_data(work))
        work[i] = orig - step
        _, gm = oracle(theta.with_data(work))
        work[i] = orig
        out[:, i] = (gp.data - gm.data) / (2.0 * step)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# Fisher probes
# ---------------------------------------------------------------------------


def tr_f_mc(
    spec: ModelSpec,
    theta: ParamVector,
    data,
    n_examples: int = 512,
    labels_per_example: int = 1,
    seed: int = 0,
) -> CurvatureEstimate:
    """Monte-Carlo trace of the FIM: mean |g(x, y_hat)|^2 with y_hat ~ p_theta(.|x).

    Examples are drawn without replacement; terms are ordered by example
    index, then by label draw.
    """
    n_total = len(data.inputs)
    if n_total == 0:
        raise ValueError("empty dataset")
    if not 1 <= n_examples <= n_total:
        raise ValueError(f"n_examples must lie in [1, {n_total}]")
    if labels_per_example < 1:
        raise ValueError("labels_per_example must be >= 1")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_total, size=n_examples, replace=False))
    x = data.inputs[idx]
    probs = softmax(forward_logits(spec, theta, x))
    labels = draw_categorical(probs, rng.random((n_examples, labels_per_example)))
    xs = np.repeat(x, labels_per_example, axis=0)
    terms = per_example_sq_norms(spec, theta, xs, labels.reshape(-1))
    value, se = _mean_and_se(terms)
    return CurvatureEstimate("TrF", value, terms.size, se)


def tr_f_exact(spec: ModelSpec, theta: ParamVector, data, cap: int = 1_000_000) -> CurvatureEstimate:
    """mean_x sum_y p(y|x) |g(x, y)|^2, enumerating every class."""
    n, c = len(data.inputs), spec.n_classes
    if n == 0:
        raise ValueError("empty dataset")
    if n * c > cap:
        raise ValueError(f"{n * c} gradient evaluations exceeds the cap of {cap}")
    probs = softmax(forward_logits(spec, theta, data.inputs))
    xs = np.repeat(data.inputs, c, axis=0)
    ys = np.tile(np.arange(c), n)
    sq = per_example_sq_norms(spec, theta, xs, ys).reshape(n, c)
    value = float(np.mean(np.sum(probs * sq, axis=1)))
    return CurvatureEstimate("TrF_exact", value, n * c, 0.0)


def tr_f_minibatch(spec: ModelSpec, theta: ParamVector, batch, seed: int = 0) -> CurvatureEstimate:
    """|mean_i g(x_i, y_hat_i)|^2 with one model-sampled label per example."""
    x = batch.inputs
    if len(x) == 0:
        raise ValueError("empty batch")
    labels = sample_model_labels(spec, theta, x, seed)
    _, g = ModelOracle(spec, x, labels)(theta)
    return CurvatureEstimate("TrF_minibatch", float(np.dot(g.data, g.data)), len(x), 0.0)


def empirical_fisher_trace(spec: ModelSpec, theta: ParamVector, data) -> CurvatureEstimate:
    """mean |g(x, y_true)|^2 over the data."""
    if len(data.inputs) == 0:
        raise ValueError("empty dataset")
    terms = per_example_sq_norms(spec, theta, data.inputs, data.labels)
    value, se = _mean_and_se(terms)
    return CurvatureEstimate("EmpiricalFisher", value, terms.size, se)
