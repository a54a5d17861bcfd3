"""The configured SGD loop with scheduled probes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import NonFiniteError, ParamVector
from ..curvature import (
    HvpConfig,
    empirical_fisher_trace,
    tr_f_mc,
    tr_f_minibatch,
    tr_h_hutchinson,
)
from ..datasets import (
    Batch,
    Dataset,
    batch_iter,
    gen_gaussians,
    gen_spirals,
    inject_label_noise,
    load_flds,
    load_idx,
    split,
)
from ..nets import ModelOracle, ModelSpec, forward_logits, init_params, per_example_cross_entropy
from ..optim import LrSchedule, SgdState, lr_at, sgd_step
from ..regularizers import PenaltyCache, regularized_step_grad
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, stream_seed, validate
from .metrics import MetricsRow, MetricsWriter, RunSummary, summarize_rows


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"non-finite value at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_data(cfg: ExperimentConfig) -> Splits:
    """Build the dataset, split it, and corrupt the training labels if asked."""
    d = cfg.data
    if d.source == "spirals":
        data = gen_spirals(d.classes, d.per_class, d.noise, stream_seed(d.seed, "data"), d.turns)
    elif d.source == "gaussians":
        data = gen_gaussians(d.classes, d.per_class, d.dim, d.separation, stream_seed(d.seed, "data"))
    elif d.source == "idx":
        data = load_idx(d.images, d.labels, d.classes)
    elif d.source == "flds":
        data = load_flds(d.path)
    else:
        raise ValueError(f"unknown data source {d.source!r}")
    train, val, test = split(data, d.split, stream_seed(d.seed, "split"))
    if d.label_noise > 0:
        train, _ = inject_label_noise(train, d.label_noise, stream_seed(d.seed, "noise"))
    return Splits(train, val, test)


def model_spec(cfg: ExperimentConfig, data: Dataset) -> ModelSpec:
    m = cfg.model
    hidden = m.hidden if m.kind == "mlp" else ()
    return ModelSpec(m.kind, data.input_shape, data.n_classes, hidden, m.activation, m.channels)


def evaluate(spec: ModelSpec, theta: ParamVector, data: Dataset, chunk: int = 4096) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over the whole dataset."""
    losses, correct = [], []
    for start in range(0, len(data), chunk):
        logits = forward_logits(spec, theta, data.inputs[start : start + chunk])
        y = data.labels[start : start + chunk]
        losses.append(per_example_cross_entropy(logits, y))
        correct.append(np.argmax(logits, axis=1) == y)
    return float(np.mean(np.concatenate(losses))), float(np.mean(np.concatenate(correct)))


def _accuracy(spec, theta, inputs, labels) -> float:
    return float(np.mean(np.argmax(forward_logits(spec, theta, inputs), axis=1) == labels))


@dataclass(frozen=True)
class GroupStats:
    norm_clean: float
    norm_noisy: float
    ratio: float
    cosine: float


def group_gradient_stats(spec, theta, data: Dataset, mask, cap: int = 0, seed: int = 0) -> GroupStats:
    """Mean-gradient norms of the clean and noisy groups under their stored labels.

    With ``cap`` > 0 each group is subsampled (seeded, without replacement)
    to at most ``cap`` examples.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(data),):
        raise ValueError("mask is not aligned with the data")
    if mask.all() or not mask.any():
        raise ValueError("mask must contain both clean and noisy examples")
    rng = np.random.default_rng(seed)
    grads = []
    for group in (np.flatnonzero(~mask), np.flatnonzero(mask)):
        if cap and group.size > cap:
            group = np.sort(rng.choice(group, size=cap, replace=False))
        _, g = ModelOracle(spec, data.inputs[group], data.labels[group])(theta)
        grads.append(g.data)
    g_clean, g_noisy = grads
    n_clean, n_noisy = float(np.linalg.norm(g_clean)), float(np.linalg.norm(g_noisy))
    ratio = n_noisy / n_clean if n_clean > 0 else float("inf")
    denom = n_clean * n_noisy
    cosine = float(np.dot(g_clean, g_noisy) / denom) if denom > 0 else 0.0
    return GroupStats(n_clean, n_noisy, ratio, cosine)


def _subset(data: Dataset, size: int, seed: int) -> Batch:
    n = len(data)
    size = min(size, n)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
    return Batch(data.inputs[idx], data.labels[idx], idx)


def probe_fields(cfg: ExperimentConfig, spec, theta, train: Dataset, key: int) -> dict:
    """Curvature probes at one logging point; draws only from the probe stream."""
    p = cfg.probe
    seed = cfg.run.seed
    out = {}
    n = len(train)
    out["tr_f"] = tr_f_mc(
        spec, theta, train, min(p.trf_examples, n), p.trf_labels, stream_seed(seed, "probe", key, 0)
    ).value
    if p.trf_minibatch:
        batch = _subset(train, cfg.optim.batch_size, stream_seed(seed, "probe", key, 1))
        out["tr_f_minibatch"] = tr_f_minibatch(spec, theta, batch, stream_seed(seed, "probe", key, 2)).value
    if p.hutchinson_m > 0:
        batch = _subset(train, p.hutchinson_examples, stream_seed(seed, "probe", key, 3))
        oracle = ModelOracle(spec, batch.inputs, batch.labels)
        out["tr_h"] = tr_h_hutchinson(
            oracle, theta, p.hutchinson_m, stream_seed(seed, "probe", key, 4), HvpConfig(p.hvp_c)
        ).value
    if p.empirical_fisher:
        batch = _subset(train, p.trf_examples, stream_seed(seed, "probe", key, 5))
        out["empirical_fisher"] = empirical_fisher_trace(spec, theta, batch).value
    return out


@dataclass
class RunResult:
    rows: list[MetricsRow]
    summary: RunSummary
    theta: ParamVector
    state: SgdState
    spec: ModelSpec
    steps: int
    metrics_path: Path | None = None


def run_train(
    cfg: ExperimentConfig,
    out_dir=None,
    *,
    data: Splits | None = None,
    initial: ParamVector | None = None,
    first_epoch: int = 0,
    first_step: int = 0,
    probes: bool = True,
) -> RunResult:
    """Train for epochs [first_epoch, optim.epochs) and log metrics.

    ``initial`` continues from given parameters (with fresh momentum), as the
    branch experiment does. With ``out_dir`` the run writes metrics.csv,
    summary.txt, config.txt and checkpoint.flck there.
    """
    validate(cfg)
    data = data or load_data(cfg)
    train, val, test = data.train, data.val, data.test
    spec = model_spec(cfg, train)
    seed = cfg.run.seed
    o = cfg.optim
    if o.batch_size > len(train):
        raise ValueError(f"batch size {o.batch_size} exceeds the {len(train)} training examples")
    theta = initial.copy() if initial is not None else init_params(
        spec, cfg.model.init, stream_seed(seed, "init"), cfg.model.init_scale
    )
    theta.check_layout(spec.layout)
    state = SgdState.fresh(theta, o.momentum, o.weight_decay)
    schedule = LrSchedule(o.lr, o.milestones, o.gamma)
    hvp_cfg = HvpConfig(cfg.probe.hvp_c)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    writer = MetricsWriter(out_path / "metrics.csv" if out_path is not None else None)

    mask = train.noise_mask
    has_groups = mask is not None and mask.any() and not mask.all()
    epoch_probes = probes and cfg.probe.every > 0
    step_probes = probes and cfg.probe.per_step

    def log_epoch(epoch: int, step: int, lr: float, penalty) -> None:
        train_loss, train_acc = evaluate(spec, theta, train)
        val_loss, val_acc = evaluate(spec, theta, val)
        _, test_acc = evaluate(spec, theta, test)
        row = MetricsRow(epoch, step, lr, train_loss, train_acc, val_loss, val_acc, test_acc, penalty_value=penalty)
        if epoch_probes and epoch % cfg.probe.every == 0:
            for name, value in probe_fields(cfg, spec, theta, train, epoch).items():
                setattr(row, name, value)
        if has_groups:
            gs = group_gradient_stats(
                spec, theta, train, mask, cfg.probe.group_cap, stream_seed(seed, "group", epoch)
            )
            row.grad_norm_clean, row.grad_norm_noisy = gs.norm_clean, gs.norm_noisy
            row.grad_norm_ratio, row.cos_clean_noisy = gs.ratio, gs.cosine
            row.train_acc_clean = _accuracy(spec, theta, train.inputs[~mask], train.labels[~mask])
            row.train_acc_noisy = _accuracy(spec, theta, train.inputs[mask], train.labels[mask])
        writer.write(row)

    step = first_step
    try:
        try:
            log_epoch(first_epoch, step, lr_at(schedule, first_epoch), None)
            cache = PenaltyCache()
            for epoch in range(first_epoch, o.epochs):
                lr = lr_at(schedule, epoch)
                penalty = None
                for batch in batch_iter(train, o.batch_size, stream_seed(seed, "shuffle"), epoch):
                    if step_probes:
                        probe = _subset(train, cfg.probe.step_examples, stream_seed(seed, "probe", 1 << 30, step))
                        value = tr_f_mc(
                            spec, theta, probe, len(probe), 1, stream_seed(seed, "probe", 1 << 31, step)
                        ).value
                        writer.write(MetricsRow(epoch, step, lr, tr_f=value))
                    grad, penalty_now, cache = regularized_step_grad(
                        spec,
                        theta,
                        batch,
                        cfg.reg,
                        cache,
                        epoch,
                        step,
                        penalty_seed=stream_seed(seed, "penalty", step),
                        mixup_seed=stream_seed(seed, "mixup", step),
                        hvp_cfg=hvp_cfg,
                    )
                    if penalty_now is not None:
                        penalty = penalty_now
                    theta, state = sgd_step(state, theta, grad, lr)
                    if not np.all(np.isfinite(theta.data)):
                        raise TrainingDivergedError(step, "parameters")
                    step += 1
                log_epoch(epoch + 1, step, lr, penalty)
        except NonFiniteError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
    finally:
        writer.close()

    summary = summarize_rows(writer.rows, cfg.run.epsilon)
    if out_path is not None:
        (out_path / "summary.txt").write_text("\n".join(summary.lines()) + "\n", encoding="utf-8")
        save_checkpoint(out_path / "checkpoint.flck", spec, theta, state)
    return RunResult(writer.rows, summary, theta, state, spec, step, writer.path)
