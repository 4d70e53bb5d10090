"""Task streams: synthetic Gaussian classes, the SDCD dataset file, class-order splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_MAGIC = b"SDCD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sHQII")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 20
    input_dim: int = 32
    per_class: int = 50
    separation: float = 6.0
    spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.separation > 0 or not self.spread > 0:
            raise ValueError("separation and spread must be positive")
        if self.classes < 1 or self.per_class < 3:
            raise ValueError("need at least one class and three samples per class")


@dataclass
class Task:
    classes: list[int]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.tasks)

    def class_sets(self) -> list[list[int]]:
        return [t.classes for t in self.tasks]

    def validate(self) -> None:
        seen: set[int] = set()
        for i, task in enumerate(self.tasks):
            overlap = seen.intersection(task.classes)
            if overlap:
                raise ValueError(f"task {i + 1} repeats classes {sorted(overlap)}")
            seen.update(task.classes)
            for c in task.classes:
                if np.sum(task.y_train == c) < 2 or np.sum(task.y_test == c) < 1:
                    raise ValueError(f"class {c} needs >= 2 train and >= 1 test samples")


def generate_samples(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class means on a sphere of radius ``separation``, isotropic noise of std ``spread``."""
    rng = np.random.default_rng(spec.seed)
    dirs = rng.standard_normal((spec.classes, spec.input_dim))
    means = spec.separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    y = np.repeat(np.arange(spec.classes), spec.per_class)
    x = means[y] + spec.spread * rng.standard_normal((len(y), spec.input_dim))
    return x, y


def split_tasks(
    x: np.ndarray, y: np.ndarray, T: int, seed: int, train_fraction: float = 0.8
) -> TaskStream:
    """Permute class order with ``seed`` and cut it into ``T`` contiguous groups.

    Each class's samples are shuffled and split ``train_fraction`` / rest.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    classes = np.unique(y)
    if T < 1 or len(classes) % T:
        raise ValueError(f"{len(classes)} classes cannot be split into {T} equal tasks")
    rng = np.random.default_rng(seed)
    order = classes[rng.permutation(len(classes))]
    per_task = len(classes) // T
    stream = TaskStream()
    for t in range(T):
        cls = [int(c) for c in order[t * per_task : (t + 1) * per_task]]
        tr, te = [], []
        for c in cls:
            idx = np.flatnonzero(y == c)
            idx = idx[rng.permutation(len(idx))]
            n_train = min(max(2, int(round(train_fraction * len(idx)))), len(idx) - 1)
            tr.append(idx[:n_train])
            te.append(idx[n_train:])
        tr_idx = np.concatenate(tr)
        te_idx = np.concatenate(te)
        stream.tasks.append(Task(cls, x[tr_idx], y[tr_idx], x[te_idx], y[te_idx]))
    stream.validate()
    return stream


def generate_synthetic_stream(spec: SynthSpec, T: int) -> TaskStream:
    if spec.classes % T:
        raise ValueError(f"{spec.classes} classes not divisible by {T} tasks")
    x, y = generate_samples(spec)
    return split_tasks(x, y, T, spec.seed)


def save_dataset(path, x: np.ndarray, y: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"bad shapes x {x.shape}, y {y.shape}")
    n, dim = x.shape
    class_count = len(np.unique(y)) if n else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, n, dim, class_count))
        for i in range(n):
            fh.write(struct.pack("<I", int(y[i])))
            fh.write(x[i].tobytes())


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, version, n, dim, _classes = _HEADER.unpack_from(raw, 0)
    if magic != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at byte offset 4")
    rec = 4 + 8 * dim
    expected = _HEADER.size + n * rec
    if len(raw) != expected:
        bad = min(len(raw), expected)
        raise DatasetFormatError(f"{path}: payload size mismatch at byte offset {bad} (expected {expected} bytes)")
    body = np.frombuffer(raw, dtype=np.dtype([("label", "<u4"), ("x", "<f8", (dim,))]), offset=_HEADER.size, count=n)
    return body["x"].astype(np.float64).reshape(n, dim), body["label"].astype(np.int64)
