"""Metrics rows, CSV I/O, run summaries and the TrF_i extraction rule."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float | None = None
    train_loss: float | None = None
    train_acc: float | None = None
    val_loss: float | None = None
    val_acc: float | None = None
    test_acc: float | None = None
    tr_f: float | None = None
    tr_f_minibatch: float | None = None
    tr_h: float | None = None
    empirical_fisher: float | None = None
    penalty_value: float | None = None
    grad_norm_clean: float | None = None
    grad_norm_noisy: float | None = None
    grad_norm_ratio: float | None = None
    cos_clean_noisy: float | None = None
    train_acc_clean: float | None = None
    train_acc_noisy: float | None = None


COLUMNS = tuple(f.name for f in fields(MetricsRow))


class MalformedMetricsError(ValueError):
    pass


class NoProbeBeforeCrossingError(ValueError):
    """The loss crossed the threshold before any tr_f probe was recorded."""


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def format_row(row: MetricsRow) -> str:
    return ",".join(_fmt(getattr(row, name)) for name in COLUMNS) + "\n"


def header_line() -> str:
    return ",".join(COLUMNS) + "\n"


class MetricsWriter:
    """Appends rows to a CSV file, enforcing (epoch, step) ordering."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.rows: list[MetricsRow] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8", newline="")
            self._fh.write(header_line())

    def write(self, row: MetricsRow) -> None:
        if self.rows:
            last = self.rows[-1]
            if (row.epoch, row.step) < (last.epoch, last.step):
                raise ValueError("metrics rows must be written in (epoch, step) order")
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(format_row(row))
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def rows_to_csv(rows) -> str:
    return header_line() + "".join(format_row(r) for r in rows)


def parse_metrics(text: str) -> list[MetricsRow]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedMetricsError("empty metrics file") from None
    if tuple(header) != COLUMNS:
        raise MalformedMetricsError("metrics header does not match the expected columns")
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if len(rec) != len(COLUMNS):
            raise MalformedMetricsError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(rec)}")
        try:
            values = {
                name: (None if cell == "" else (int(cell) if name in ("epoch", "step") else float(cell)))
                for name, cell in zip(COLUMNS, rec)
            }
        except ValueError as exc:
            raise MalformedMetricsError(f"line {lineno}: {exc}") from exc
        if values["epoch"] is None or values["step"] is None:
            raise MalformedMetricsError(f"line {lineno}: epoch and step are required")
        rows.append(MetricsRow(**values))
    return rows


def read_metrics(path) -> list[MetricsRow]:
    return parse_metrics(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def trfi_from_log(rows, epsilon: float) -> float | None:
    """tr_f at the first logging point whose train_loss <= epsilon.

    Uses the latest tr_f probe recorded at or before that point. Returns None
    when the loss never crosses; raises when it crosses before any probe.
    """
    latest = None
    for row in rows:
        if row.tr_f is not None:
            latest = row.tr_f
        if row.train_loss is not None and row.train_loss <= epsilon:
            if latest is None:
                raise NoProbeBeforeCrossingError(
                    f"train loss crossed {epsilon} at step {row.step} before any tr_f probe"
                )
            return latest
    return None


@dataclass(frozen=True)
class RunSummary:
    trf_i: float | None
    max_tr_f: float | None
    best_val_epoch: int | None
    test_acc_at_best_val: float | None
    final_train_acc: float | None
    tr_h_at_best_val: float | None

    def lines(self, prefix: str = "") -> list[str]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            out.append(f"{prefix}{f.name}: {'missing' if value is None else _fmt(value)}")
        return out


def summarize_rows(rows, epsilon: float) -> RunSummary:
    try:
        trf_i = trfi_from_log(rows, epsilon)
    except NoProbeBeforeCrossingError:
        trf_i = None
    tr_f = [r.tr_f for r in rows if r.tr_f is not None]
    evals = [r for r in rows if r.val_acc is not None]
    best = max(evals, key=lambda r: r.val_acc) if evals else None  # first maximum wins
    train = [r.train_acc for r in rows if r.train_acc is not None]
    return RunSummary(
        trf_i=trf_i,
        max_tr_f=max(tr_f) if tr_f else None,
        best_val_epoch=None if best is None else best.epoch,
        test_acc_at_best_val=None if best is None else best.test_acc,
        final_train_acc=train[-1] if train else None,
        tr_h_at_best_val=None if best is None else best.tr_h,
    )


def pearson(x, y) -> float | None:
    """Pearson correlation, or None when either series has zero variance."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.pearsonr(x, y)[0])


def spearman(x, y) -> float | None:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.spearmanr(x, y)[0])


def trf_trh_pairs(rows) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(r.tr_f, r.tr_h) for r in rows if r.tr_f is not None and r.tr_h is not None]
    if not pairs:
        return np.zeros(0), np.zeros(0)
    arr = np.array(pairs)
    return arr[:, 0], arr[:, 1]


def fmt_value(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "missing" if value is None else "nan"
    return _fmt(value)
