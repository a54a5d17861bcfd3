"""Synthetic generators, IDX ingestion, splitting, batching and label noise."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FLDS_MAGIC = b"FLDS"
FLDS_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    # True marks an example whose label was corrupted.
    noise_mask: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) == 0:
            raise ValueError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("label out of range")
        if self.noise_mask is not None and len(self.noise_mask) != len(self.labels):
            raise ValueError("noise mask is not aligned with the labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        mask = None if self.noise_mask is None else self.noise_mask[idx]
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx], noise_mask=mask)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = None
    noise_mask: np.ndarray | None = None
    # Row-stochastic targets; set by mixup, otherwise None.
    soft_labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def targets(self) -> np.ndarray:
        return self.labels if self.soft_labels is None else self.soft_labels


def as_batch(data: Dataset) -> Batch:
    return Batch(data.inputs, data.labels, np.arange(len(data)), data.noise_mask)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def class_centers(n_classes: int, dim: int) -> np.ndarray:
    """Unit vectors: basis vectors when dim >= C, else points on a circle.

    With dim == 1 the centres are spread evenly over [-1, 1].
    """
    if dim >= n_classes:
        return np.eye(n_classes, dim)
    if dim == 1:
        return np.linspace(-1.0, 1.0, n_classes)[:, None]
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, dim))
    centers[:, 0] = np.cos(angles)
    centers[:, 1] = np.sin(angles)
    return centers


def gen_gaussians(n_classes: int, per_class: int, dim: int, separation: float, seed: int = 0) -> Dataset:
    if n_classes < 2 or per_class < 1 or dim < 1 or separation < 0:
        raise ValueError("invalid Gaussian mixture parameters")
    rng = np.random.default_rng(seed)
    centers = separation * class_centers(n_classes, dim)
    labels = np.repeat(np.arange(n_classes), per_class)
    inputs = centers[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(inputs, labels, n_classes)


def gen_spirals(
    n_classes: int = 2,
    per_class: int = 200,
    noise: float = 0.0,
    seed: int = 0,
    turns: float = 1.0,
    rotation: float = 0.0,
) -> Dataset:
    """Interleaved 2-D spiral arms.

    Arm k at parameter t in [0, 1] sits at radius 0.1 + 0.9 t and angle
    2 pi (k / C + turns t) + rotation, with N(0, noise^2) added to the angle.
    """
    if n_classes < 2 or per_class < 1:
        raise ValueError("invalid spiral parameters")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, per_class)
    radius = 0.1 + 0.9 * t
    xs, ys = [], []
    for k in range(n_classes):
        angle = 2.0 * np.pi * (k / n_classes + turns * t) + rotation
        angle = angle + noise * rng.standard_normal(per_class)
        xs.append(np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1))
        ys.append(np.full(per_class, k))
    return Dataset(np.concatenate(xs), np.concatenate(ys), n_classes)


def inject_label_noise(data: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Redraw round(fraction * N) labels uniformly over all classes.

    A redraw may land on the original class.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(data)
    k = int(np.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=k, replace=False)
    labels = data.labels.copy()
    labels[chosen] = rng.integers(0, data.n_classes, size=k)
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    return replace(data, labels=labels, noise_mask=mask), mask


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------


def standardize(data: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    return replace(data, inputs=(data.inputs - mean) / std, mean=mean, std=std)


def split(data: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded permutation, contiguous train/val/test cut, train-statistics standardization."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three positive numbers summing to 1")
    n = len(data)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} examples leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    parts = [perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]]
    train = data.subset(parts[0])
    mean = train.inputs.mean(axis=0)
    std = train.inputs.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return tuple(standardize(data.subset(p), mean, std) for p in parts)  # type: ignore[return-value]


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Batches over one seeded per-epoch permutation; the short tail batch is kept."""
    n = len(data)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size must lie in [1, {n}]")
    perm = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        mask = None if data.noise_mask is None else data.noise_mask[idx]
        yield Batch(data.inputs[idx], data.labels[idx], idx, mask)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_end:]
    if len(payload) < count:
        raise TruncatedPayloadError(f"{path}: expected {count} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Load an unsigned-byte image tensor and label vector; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = max(2, int(labels.max()) + 1)
    return Dataset(images.astype(np.float64) / 255.0, labels, n_classes)


def write_idx(data: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for 3-D inputs with values in [0, 1]."""
    if data.inputs.ndim != 3:
        raise ValueError("IDX images must be an (N, rows, cols) tensor")
    pixels = np.clip(np.rint(data.inputs * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(data.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# FLDS container
# ---------------------------------------------------------------------------
# magic "FLDS" | u8 version | u64 N | u64 d | u64 C  (little-endian)
# N*d float64 inputs | N int32 labels | u8 has_mask | [N u8 mask]


def save_flds(data: Dataset, path) -> None:
    n = len(data)
    flat = np.ascontiguousarray(data.inputs.reshape(n, -1), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FLDS_MAGIC)
        fh.write(struct.pack("<BQQQ", FLDS_VERSION, n, flat.shape[1], data.n_classes))
        fh.write(flat.tobytes())
        fh.write(data.labels.astype("<i4").tobytes())
        if data.noise_mask is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            fh.write(data.noise_mask.astype(np.uint8).tobytes())


def load_flds(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != FLDS_MAGIC:
        raise ValueError(f"{path}: not an FLDS file")
    header = struct.calcsize("<BQQQ")
    version, n, d, c = struct.unpack("<BQQQ", raw[4 : 4 + header])
    if version != FLDS_VERSION:
        raise ValueError(f"{path}: unsupported FLDS version {version}")
    pos = 4 + header
    need = n * d * 8 + n * 4 + 1
    if len(raw) < pos + need:
        raise ValueError(f"{path}: truncated FLDS payload")
    inputs = np.frombuffer(raw, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += n * d * 8
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=pos).astype(np.int64)
    pos += n * 4
    mask = None
    if raw[pos] == 1:
        mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos + 1).astype(bool)
    return Dataset(inputs, labels, int(c), noise_mask=mask)
