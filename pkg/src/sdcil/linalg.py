"""Dense linear algebra used by the drift statistics and the calibration loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class InvalidInputError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot} is {value!r}")
        self.pivot = pivot
        self.value = value


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular factor ``L`` with ``L @ L.T`` equal to the factorized matrix."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T

    def whiten(self, diffs: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} v`` for every row ``v`` of ``diffs``."""
        diffs = np.atleast_2d(diffs)
        return solve_triangular(self.lower, diffs.T, lower=True, check_finite=False).T


def as_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    # average with the transpose so the result is exactly symmetric
    return 0.5 * (m + m.T)


def regularize_covariance(cov: np.ndarray, eps_scale: float = 1e-4) -> np.ndarray:
    """Add a trace-scaled ridge ``eps * I``.

    ``eps = eps_scale * trace(cov) / d``, falling back to ``eps_scale`` itself when
    the trace is zero (a class whose embeddings all coincide).
    """
    if not eps_scale > 0:
        raise InvalidInputError(f"eps_scale must be positive, got {eps_scale}")
    s = as_symmetric(cov)
    d = s.shape[0]
    tr = float(np.trace(s))
    eps = eps_scale * tr / d if tr != 0.0 else eps_scale
    return s + eps * np.eye(d)


def cholesky_decompose(m: np.ndarray) -> CholFactor:
    """Cholesky factorization, raising with the failing pivot index."""
    a = as_symmetric(m)
    d = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(d):
        row = lower[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, float(pivot))
        ljj = np.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < d:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ row) / ljj
    return CholFactor(lower)


def mahalanobis_distance(x: np.ndarray, y: np.ndarray, chol: CholFactor) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.shape != (chol.dim,):
        raise InvalidInputError(
            f"dimension mismatch: x {x.shape}, y {y.shape}, factor dim {chol.dim}"
        )
    # |x - y| is sign-symmetric, so the two orders agree bit for bit
    diff = np.abs(x - y)
    z = chol.whiten(diff)[0]
    return float(np.sqrt(z @ z))


def covariance_from_embeddings(embeddings: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Biased (1/N) covariance of ``embeddings`` about a given ``mean``."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise InvalidInputError("need at least one embedding")
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (e.shape[1],):
        raise InvalidInputError(f"mean has shape {mean.shape}, embeddings have dim {e.shape[1]}")
    c = e - mean
    cov = c.T @ c / e.shape[0]
    upper = np.triu(cov)
    return upper + np.triu(cov, 1).T


def sample_gaussian(
    mean: np.ndarray, chol: CholFactor, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` rows ``mean + L z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (chol.dim,):
        raise InvalidInputError(f"mean dim {mean.shape} does not match factor dim {chol.dim}")
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    z = rng.standard_normal((count, chol.dim))
    return mean + z @ chol.lower.T
