"""Training objectives, each recorded on a tape so it can be differentiated."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .linalg import CholFactor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    s: float = 20.0
    lam: float = 0.4

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("angular scale s must be positive")
        if self.lam < 0:
            raise ValueError("distillation weight must be non-negative")


def cosine_logits(features: Node, head: Node, s: float) -> Node:
    """``s * cos(f_i, w_k)`` for rows of ``features`` and columns of ``head``."""
    f = ad.l2_normalize(features, axis=-1)
    w = ad.l2_normalize(head, axis=0)
    return ad.scale(f @ w, s)


def angular_penalty_loss(class_tokens: Node, labels: np.ndarray, head: Node, s: float) -> Node:
    """Softmax cross-entropy over scaled cosines against one task's head.

    ``labels`` index columns of ``head`` (the task's own classes only).
    """
    return ad.cross_entropy(cosine_logits(class_tokens, head, s), labels)


def _same_class_pairs(labels: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            continue
        i, j = np.triu_indices(len(idx), k=1)
        out[int(c)] = (idx[i], idx[j])
    return out


def covariance_calibration_loss(
    current: Node, old: np.ndarray, labels: np.ndarray, chol: Mapping[int, CholFactor]
) -> Node:
    """Mean over same-class pairs of ``|d_M(current pair) - d_M(old pair)|``.

    Each class uses its own factor, computed beforehand under the old network;
    ``old`` embeddings are constants.  Classes with fewer than two rows in the
    batch contribute nothing.
    """
    tape = current.tape
    labels = np.asarray(labels)
    old = np.asarray(old, dtype=np.float64)
    terms = []
    count = 0
    for c, (i, j) in _same_class_pairs(labels).items():
        lower = chol[c].lower
        diff_new = ad.take_rows(current, i) - ad.take_rows(current, j)
        d_new = ad.row_norm(ad.whiten_rows(diff_new, lower))
        z_old = chol[c].whiten(old[i] - old[j])
        d_old = np.sqrt(np.sum(z_old * z_old, axis=1))
        terms.append(ad.sum_(ad.abs_(d_new - d_old)))
        count += len(i)
    if not terms:
        return tape.constant(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return ad.scale(total, 1.0 / count)


def angular_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine of L2-normalized vectors along the last axis, clamped to [-1, 1].

    A zero-norm vector gets similarity 0.
    """
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    zero = denom == 0
    if np.any(zero):
        log.warning("zero-norm token in angular similarity; using similarity 0")
    sim = np.sum(a * b, axis=-1) / np.where(zero, 1.0, denom)
    return np.clip(np.where(zero, 0.0, sim), -1.0, 1.0)


def distillation_weights(class_token: np.ndarray, patch_tokens: np.ndarray) -> np.ndarray:
    """Per-patch weights ``1 - sim(p_j, c)``, shape (B, L)."""
    return 1.0 - angular_similarity(patch_tokens, class_token[:, None, :])


def patch_distillation_loss(
    class_token: Node,
    patch_tokens: Node,
    previous_patches: np.ndarray,
    weights: np.ndarray | None = None,
) -> Node:
    """``mean_j (1 - sim(p_j, c)) * |p_j - p_j_old|^2``, averaged over the batch.

    The similarity weight is computed from detached values. Passing ``weights``
    pins them, which is how finite-difference checks see the same function the
    analytic gradient differentiates.
    """
    p = ad.stop_gradient(patch_tokens).value
    c = ad.stop_gradient(class_token).value
    if previous_patches.shape != p.shape:
        raise ad.ShapeError(f"patch tokens {p.shape} vs previous {previous_patches.shape}")
    weight = distillation_weights(c, p) if weights is None else weights
    diff = patch_tokens - previous_patches
    sq = ad.sum_(ad.square(diff), axis=-1)
    return ad.mean(sq * weight)


def total_loss(cls, cov, distill, lam: float):
    """``cls + cov + lam * distill``; accepts tape nodes or plain floats."""
    if isinstance(distill, Node):
        return cls + cov + ad.scale(distill, lam)
    return cls + cov + lam * distill


def head_retraining_loss(samples: np.ndarray, labels: np.ndarray, head: Node, s: float | None = None) -> Node:
    """Cross-entropy over every class seen so far.

    With ``s=None`` the logits are plain ``w_k . h``; with a scale the heads are
    scored as cosine classifiers, ``s * cos(h, w_k)``.
    """
    x = head.tape.constant(samples)
    logits = x @ head if s is None else cosine_logits(x, head, s)
    return ad.cross_entropy(logits, labels)
