"""Per-class Gaussian statistics and prototype drift compensation.

After a task is learned, every old prototype is moved by a kernel-weighted
average of how the current task's embeddings moved between the old and the
new network.  Samples close to the old prototype (under the old network) weigh
most.  Covariances are stored but never moved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .linalg import (
    CholFactor,
    cholesky_decompose,
    covariance_from_embeddings,
    regularize_covariance,
)
from .snapshot import read_tensors, write_tensors

STATS_MAGIC = b"SDCS"


@dataclass
class ClassStats:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    count: int
    session: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"class {self.class_id}: count must be >= 1")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError(f"class {self.class_id}: non-finite mean")


@dataclass
class ShiftEstimate:
    delta: np.ndarray
    total_weight: float
    contributing_samples: int
    underflow: bool = False


@dataclass
class StatsStore:
    classes: dict[int, ClassStats] = field(default_factory=dict)
    # session -> {class_id: applied shift}
    drift_log: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)

    def __contains__(self, c: int) -> bool:
        return c in self.classes

    def __getitem__(self, c: int) -> ClassStats:
        return self.classes[c]

    def put(self, stats: ClassStats) -> None:
        self.classes[stats.class_id] = stats

    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def copy(self) -> "StatsStore":
        return StatsStore(
            {c: ClassStats(s.class_id, s.mean.copy(), s.cov.copy(), s.count, s.session) for c, s in self.classes.items()},
            {t: {c: v.copy() for c, v in d.items()} for t, d in self.drift_log.items()},
        )

    def save(self, path, fingerprint: str = "") -> None:
        tensors: dict[str, np.ndarray] = {}
        for c in self.class_ids():
            s = self.classes[c]
            tensors[f"class.{c}.meta"] = np.array([s.count, s.session], dtype=np.float64)
            tensors[f"class.{c}.mean"] = s.mean
            tensors[f"class.{c}.cov"] = s.cov
        for t in sorted(self.drift_log):
            for c in sorted(self.drift_log[t]):
                tensors[f"drift.{t}.{c}"] = self.drift_log[t][c]
        write_tensors(path, STATS_MAGIC, {"fingerprint": fingerprint, "classes": len(self.classes)}, tensors)

    @classmethod
    def load(cls, path, expected_fingerprint: str | None = None) -> "StatsStore":
        _, tensors = read_tensors(path, STATS_MAGIC, expected_fingerprint)
        store = cls()
        for name, arr in tensors.items():
            kind, *rest = name.split(".")
            if kind == "class" and rest[1] == "meta":
                c = int(rest[0])
                store.put(ClassStats(c, tensors[f"class.{c}.mean"], tensors[f"class.{c}.cov"], int(arr[0]), int(arr[1])))
            elif kind == "drift":
                store.drift_log.setdefault(int(rest[0]), {})[int(rest[1])] = arr
        return store


def compute_class_mean(embeddings: np.ndarray, labels: np.ndarray, c: int) -> np.ndarray:
    mask = np.asarray(labels) == c
    if not mask.any():
        raise ValueError(f"no samples of class {c}")
    return np.asarray(embeddings, dtype=np.float64)[mask].mean(axis=0)


def shift_weights(old_embeds: np.ndarray, mu_prev: np.ndarray, sigma: float) -> tuple[np.ndarray, bool]:
    """Gaussian-kernel weights in (0, 1] and an underflow flag.

    Normalization makes the max-shifted weights give the same ratio; the raw
    weights are what is returned when they do not underflow.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    sq = np.sum((np.asarray(old_embeds) - mu_prev) ** 2, axis=1)
    expo = -sq / (2.0 * sigma**2)
    raw = np.exp(expo)
    underflow = not np.any(raw > 0)
    if underflow and len(raw):
        raw = np.exp(expo - expo.max())
    return raw, underflow


def estimate_mean_shift(
    old_embeds: np.ndarray, new_embeds: np.ndarray, mu_prev: np.ndarray, sigma: float = 1.0
) -> ShiftEstimate:
    """Kernel-weighted mean of per-sample embedding shifts ``new - old``.

    ``old_embeds`` / ``new_embeds`` are the current task's samples under the old
    and the new network; ``mu_prev`` is the old class's stored prototype.  When
    every raw weight underflows, the weights are recomputed with the largest
    exponent shifted to zero and ``underflow`` is set.
    """
    old_embeds = np.asarray(old_embeds, dtype=np.float64)
    new_embeds = np.asarray(new_embeds, dtype=np.float64)
    if old_embeds.shape != new_embeds.shape:
        raise ValueError(f"shape mismatch {old_embeds.shape} vs {new_embeds.shape}")
    w, underflow = shift_weights(old_embeds, mu_prev, sigma)
    total = float(w.sum())
    d = old_embeds.shape[1]
    if len(w) == 0 or not total > 0:
        return ShiftEstimate(np.zeros(d), 0.0, 0, True)
    delta = (w / total) @ (new_embeds - old_embeds)
    return ShiftEstimate(delta, total, int(np.count_nonzero(w)), underflow)


def compensate_all_means(
    store: StatsStore,
    shifts: Mapping[int, ShiftEstimate | np.ndarray],
    session: int,
    fresh: Mapping[int, ClassStats] | None = None,
) -> StatsStore:
    """Apply ``mu <- mu + delta`` to every listed old class and insert fresh stats.

    Returns a new store; covariances and counts of old classes are untouched.
    """
    out = store.copy()
    applied = {}
    for c in sorted(shifts):
        if c not in out:
            raise KeyError(f"class {c} missing from the statistics store")
        est = shifts[c]
        delta = est.delta if isinstance(est, ShiftEstimate) else np.asarray(est, dtype=np.float64)
        out.classes[c].mean = out.classes[c].mean + delta
        applied[c] = delta.copy()
    out.drift_log[session] = applied
    for c in sorted(fresh or {}):
        out.put(fresh[c])
    return out


@dataclass
class TaskCovariance:
    mean: np.ndarray
    cov: np.ndarray
    chol: CholFactor


def class_statistics(
    embeddings: np.ndarray, labels: np.ndarray, classes, eps_scale: float = 1e-4
) -> dict[int, TaskCovariance]:
    """Mean, biased covariance and factor of the regularized covariance per class."""
    out = {}
    labels = np.asarray(labels)
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} absent from task data")
        mu = compute_class_mean(embeddings, labels, c)
        cov = covariance_from_embeddings(embeddings[mask], mu)
        out[int(c)] = TaskCovariance(mu, cov, cholesky_decompose(regularize_covariance(cov, eps_scale)))
    return out


def precompute_task_covariances(old_model, x: np.ndarray, labels: np.ndarray, classes, eps_scale: float = 1e-4):
    """Statistics of the task's classes under the frozen ``old_model``.

    ``old_model`` is anything with ``embed(x) -> (class_tokens, patch_tokens)``.
    Returns the per-class statistics and the old class tokens, which the
    caller reuses for the calibration loss and the shift estimate.
    """
    old_cls, _ = old_model.embed(x)
    return class_statistics(old_cls, labels, classes, eps_scale), old_cls
