"""Multi-run studies: sweeps, label noise, branching, delayed start, summaries.

Every driver returns a report object whose ``text()`` follows a stable line
grammar: ``key: value`` pairs, then whitespace-aligned tables whose first
line is a header.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, stream_seed
from .metrics import (
    NoProbeBeforeCrossingError,
    RunSummary,
    fmt_value,
    pearson,
    read_metrics,
    spearman,
    summarize_rows,
    trf_trh_pairs,
    trfi_from_log,
)
from .train import RunResult, Splits, TrainingDivergedError, load_data, run_train

AXES = {"learning_rate": "optim.lr", "batch_size": "optim.batch_size"}


def _table(header: list[str], rows: list[list]) -> list[str]:
    cells = [header] + [[fmt_value(v) if not isinstance(v, str) else v for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]


def _subdir(out_dir, name: str):
    return None if out_dir is None else Path(out_dir) / name


def _write_report(out_dir, name: str, text: str) -> None:
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(text, encoding="utf-8")


def final_test_acc(rows) -> float | None:
    accs = [r.test_acc for r in rows if r.test_acc is not None]
    return accs[-1] if accs else None


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRun:
    value: float
    seed: int
    trf_i: float | None
    test_acc: float | None
    error: str | None = None


@dataclass
class SweepReport:
    axis: str
    runs: list[SweepRun]
    pearson_log_trfi: float | None
    spearman_trfi: float | None

    def per_value(self) -> list[list]:
        rows = []
        for value in dict.fromkeys(r.value for r in self.runs):
            ok = [r for r in self.runs if r.value == value and r.error is None]
            trf = [r.trf_i for r in ok if r.trf_i is not None]
            acc = [r.test_acc for r in ok if r.test_acc is not None]
            rows.append(
                [
                    value,
                    float(np.mean(trf)) if trf else None,
                    float(np.std(trf)) if trf else None,
                    float(np.mean(acc)) if acc else None,
                    float(np.std(acc)) if acc else None,
                    len(ok),
                ]
            )
        return rows

    def text(self) -> str:
        failures = [r for r in self.runs if r.error is not None]
        lines = [
            f"axis: {self.axis}",
            f"runs: {len(self.runs)}",
            f"failures: {len(failures)}",
            f"pearson_log_trfi_test_acc: {fmt_value(self.pearson_log_trfi)}",
            f"spearman_trfi_test_acc: {fmt_value(self.spearman_trfi)}",
            "",
        ]
        lines += _table(["value", "trfi_mean", "trfi_std", "test_acc_mean", "test_acc_std", "n_ok"], self.per_value())
        lines.append("")
        lines += _table(
            ["value", "seed", "trf_i", "test_acc", "error"],
            [[r.value, r.seed, r.trf_i, r.test_acc, r.error or "-"] for r in self.runs],
        )
        return "\n".join(lines) + "\n"


def run_sweep(base: ExperimentConfig, axis: str, values, seeds, out_dir=None) -> SweepReport:
    """Grid over one axis and several seeds; correlates TrF_i with final test accuracy."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    values, seeds = list(values), list(seeds)
    if len(values) < 2:
        raise ValueError("a sweep needs at least two axis values")
    if len(seeds) < 2:
        raise ValueError("a sweep needs at least two seeds")
    key = AXES[axis]
    data = load_data(base)
    runs = []
    for value in values:
        for seed in seeds:
            cfg = base.update({key: value, "run.seed": seed})
            sub = _subdir(out_dir, f"{axis}={value}_seed={seed}")
            try:
                result = run_train(cfg, sub, data=data)
                try:
                    trf_i = trfi_from_log(result.rows, cfg.run.epsilon)
                except NoProbeBeforeCrossingError:
                    trf_i = None
                runs.append(SweepRun(float(value), int(seed), trf_i, final_test_acc(result.rows)))
            except (TrainingDivergedError, ValueError) as exc:
                runs.append(SweepRun(float(value), int(seed), None, None, str(exc)))
    usable = [r for r in runs if r.trf_i is not None and r.test_acc is not None and r.trf_i > 0]
    log_trf = np.log([r.trf_i for r in usable]) if usable else np.zeros(0)
    acc = np.array([r.test_acc for r in usable])
    report = SweepReport(axis, runs, pearson(log_trf, acc), spearman(log_trf, acc))
    _write_report(out_dir, "sweep_report.txt", report.text())
    return report


# ---------------------------------------------------------------------------
# Label noise
# ---------------------------------------------------------------------------


@dataclass
class NoisyReport:
    fraction: float
    result: RunResult
    test_acc_at_best_val: float | None
    best_val_epoch: int | None
    mean_ratio_gap: float | None
    early_cosine: float | None
    noisy_acc_at_clean_90: float | None

    def text(self) -> str:
        rows = self.result.rows
        last = rows[-1]
        lines = [
            f"noise_fraction: {fmt_value(self.fraction)}",
            f"best_val_epoch: {fmt_value(self.best_val_epoch)}",
            f"test_acc_at_best_val: {fmt_value(self.test_acc_at_best_val)}",
            f"final_train_acc_clean: {fmt_value(last.train_acc_clean)}",
            f"final_train_acc_noisy: {fmt_value(last.train_acc_noisy)}",
            f"noisy_acc_at_clean_90: {fmt_value(self.noisy_acc_at_clean_90)}",
            f"mean_abs_ratio_minus_1: {fmt_value(self.mean_ratio_gap)}",
            f"early_cosine: {fmt_value(self.early_cosine)}",
        ]
        return "\n".join(lines) + "\n"


EARLY_EPOCHS = 10


def noisy_acc_at_clean(rows, target: float = 0.9) -> float | None:
    """Noisy-train accuracy at the first logging point where clean accuracy reaches ``target``."""
    for row in rows:
        if row.train_acc_clean is not None and row.train_acc_clean >= target:
            return row.train_acc_noisy
    return None


def early_cosine(rows, epochs: int = EARLY_EPOCHS) -> float | None:
    """Mean clean/noisy gradient cosine over the logging points in epochs 1..``epochs``."""
    vals = [r.cos_clean_noisy for r in rows if r.cos_clean_noisy is not None and 1 <= r.epoch <= epochs]
    return float(np.mean(vals)) if vals else None


def run_noisy(cfg: ExperimentConfig, fraction: float, out_dir=None, data: Splits | None = None) -> NoisyReport:
    """Train with a fraction of training labels redrawn uniformly.

    Val and test labels stay clean. The report quotes test accuracy at the
    best-validation epoch. Pass ``data`` only if it already carries the
    requested noise.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("noise fraction must lie in (0, 1)")
    cfg = cfg.set("data.label_noise", float(fraction))
    result = run_train(cfg, out_dir, data=data)
    summary = result.summary
    rows = [r for r in result.rows if r.grad_norm_ratio is not None]
    gap = float(np.mean([abs(r.grad_norm_ratio - 1.0) for r in rows])) if rows else None
    report = NoisyReport(
        fraction,
        result,
        summary.test_acc_at_best_val,
        summary.best_val_epoch,
        gap,
        early_cosine(rows),
        noisy_acc_at_clean(result.rows),
    )
    _write_report(out_dir, "noisy_report.txt", report.text())
    return report


# ---------------------------------------------------------------------------
# Branching
# ---------------------------------------------------------------------------


@dataclass
class BranchChild:
    parent: str
    index: int
    seed: int
    best_test_acc: float | None
    best_test_epoch: int | None
    tr_h_at_best_test: float | None


@dataclass
class BranchReport:
    branch_epoch: int
    parent_trf_i: dict
    parent_tr_f: dict
    children: list[BranchChild]

    def medians(self) -> dict:
        out = {}
        for name in ("high", "low"):
            vals = [c.tr_h_at_best_test for c in self.children if c.parent == name and c.tr_h_at_best_test is not None]
            out[name] = float(np.median(vals)) if vals else None
        return out

    def median_best_test(self) -> dict:
        out = {}
        for name in ("high", "low"):
            vals = [c.best_test_acc for c in self.children if c.parent == name and c.best_test_acc is not None]
            out[name] = float(np.median(vals)) if vals else None
        return out

    def low_trf_parent(self) -> str | None:
        """The parent with the smaller Tr(F) at the branch epoch."""
        high, low = self.parent_tr_f.get("high"), self.parent_tr_f.get("low")
        if high is None or low is None or high == low:
            return None
        return "high" if high < low else "low"

    def direction_holds(self) -> bool | None:
        """Whether children of the low-Tr(F) parent end in flatter minima (smaller median TrH_f)."""
        first = self.low_trf_parent()
        med = self.medians()
        if first is None or med["high"] is None or med["low"] is None:
            return None
        second = "low" if first == "high" else "high"
        return med[first] < med[second]

    def text(self) -> str:
        med, acc = self.medians(), self.median_best_test()
        holds = self.direction_holds()
        lines = [f"branch_epoch: {self.branch_epoch}"]
        lines.append(f"low_trf_parent: {self.low_trf_parent() or 'undefined'}")
        lines.append(f"flatter_children_of_low_trf_parent: {'undefined' if holds is None else str(holds).lower()}")
        for name in ("high", "low"):
            lines.append(f"parent_{name}_trf_i: {fmt_value(self.parent_trf_i.get(name))}")
            lines.append(f"parent_{name}_tr_f_at_branch: {fmt_value(self.parent_tr_f.get(name))}")
            lines.append(f"children_{name}_median_trh_f: {fmt_value(med[name])}")
            lines.append(f"children_{name}_median_best_test_acc: {fmt_value(acc[name])}")
        lines.append("")
        lines += _table(
            ["parent", "child", "seed", "best_test_acc", "best_test_epoch", "trh_f"],
            [[c.parent, c.index, c.seed, c.best_test_acc, c.best_test_epoch, c.tr_h_at_best_test] for c in self.children],
        )
        return "\n".join(lines) + "\n"


def best_test_point(rows):
    """First row with the highest test accuracy, among Hessian-probed rows when there are any."""
    evals = [r for r in rows if r.test_acc is not None]
    probed = [r for r in evals if r.tr_h is not None]
    evals = probed or evals
    return max(evals, key=lambda r: r.test_acc) if evals else None


def run_branch(
    cfg: ExperimentConfig,
    branch_epoch: int,
    n_branches: int,
    high: ExperimentConfig | None = None,
    low: ExperimentConfig | None = None,
    out_dir=None,
) -> BranchReport:
    """Two parents trained to ``branch_epoch``, then ``n_branches`` children each.

    ``high`` and ``low`` are the two parent configurations (default: ``cfg``
    with a 10x larger and the given learning rate). Every child continues
    with the ``low`` configuration from its parent's parameters, with a fresh
    seed and fresh momentum, until ``low.optim.epochs``.
    """
    if n_branches < 2:
        raise ValueError("n_branches must be >= 2")
    low = low or cfg
    high = high or cfg.set("optim.lr", cfg.optim.lr * 10.0)
    if not 0 < branch_epoch < low.optim.epochs:
        raise ValueError("branch epoch must lie inside the child horizon")
    data = load_data(low)
    master = cfg.run.seed
    parent_trf_i, parent_tr_f, children = {}, {}, []
    for name, pcfg in (("high", high), ("low", low)):
        pcfg = pcfg.update({"optim.epochs": branch_epoch, "run.seed": master})
        parent = run_train(pcfg, _subdir(out_dir, f"parent_{name}"), data=data)
        try:
            parent_trf_i[name] = trfi_from_log(parent.rows, pcfg.run.epsilon)
        except NoProbeBeforeCrossingError:
            parent_trf_i[name] = None
        probes = [r.tr_f for r in parent.rows if r.tr_f is not None]
        parent_tr_f[name] = probes[-1] if probes else None
        for k in range(n_branches):
            seed = stream_seed(master, "branch", 0 if name == "high" else 1, k) % (2**31)
            child = run_train(
                low.set("run.seed", seed),
                _subdir(out_dir, f"child_{name}_{k}"),
                data=data,
                initial=parent.theta,
                first_epoch=branch_epoch,
                first_step=parent.steps,
            )
            best = best_test_point(child.rows)
            children.append(
                BranchChild(
                    name,
                    k,
                    seed,
                    None if best is None else best.test_acc,
                    None if best is None else best.epoch,
                    None if best is None else best.tr_h,
                )
            )
    report = BranchReport(branch_epoch, parent_trf_i, parent_tr_f, children)
    _write_report(out_dir, "branch_report.txt", report.text())
    return report


# ---------------------------------------------------------------------------
# Delayed start
# ---------------------------------------------------------------------------

DELAYED_STARTS = (1, 2, 4, 8, 16, 32, 64, 128)


@dataclass
class DelayedStartReport:
    rows: list  # (start_epoch, final_test_acc, max_tr_f)

    def text(self) -> str:
        return "\n".join(_table(["start_epoch", "final_test_acc", "max_tr_f"], self.rows)) + "\n"


def run_delayed_start(cfg: ExperimentConfig, starts=DELAYED_STARTS, out_dir=None) -> DelayedStartReport:
    starts = list(starts)
    if not starts:
        raise ValueError("start epoch list is empty")
    data = load_data(cfg)
    rows = []
    for start in starts:
        result = run_train(cfg.set("reg.start_epoch", int(start)), _subdir(out_dir, f"start={start}"), data=data)
        rows.append([int(start), final_test_acc(result.rows), result.summary.max_tr_f])
    report = DelayedStartReport(rows)
    _write_report(out_dir, "delayed_start_report.txt", report.text())
    return report


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass
class SummaryReport:
    entries: list = field(default_factory=list)  # (name, RunSummary, pearson, n_pairs)

    def text(self) -> str:
        lines = []
        for name, summary, corr, n in self.entries:
            lines.append(f"file: {name}")
            lines += summary.lines("  ")
            lines.append(f"  pearson_tr_f_tr_h: {'undefined' if corr is None else fmt_value(corr)}")
            lines.append(f"  n_tr_f_tr_h_pairs: {n}")
        return "\n".join(lines) + "\n"


def summarize(paths, epsilon: float) -> SummaryReport:
    paths = list(paths)
    if not paths:
        raise ValueError("summarize needs at least one metrics file")
    report = SummaryReport()
    for path in paths:
        rows = read_metrics(path)
        summary: RunSummary = summarize_rows(rows, epsilon)
        x, y = trf_trh_pairs(rows)
        report.entries.append((str(path), summary, pearson(x, y), int(x.size)))
    return report
