"""Finite-difference checks of every training loss on small random instances."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, gradient_check
from .backbone import BackboneConfig, init_backbone
from .drift import class_statistics
from .linalg import CholFactor, cholesky_decompose
from .losses import (
    angular_penalty_loss,
    covariance_calibration_loss,
    distillation_weights,
    head_retraining_loss,
    patch_distillation_loss,
    total_loss,
)

THRESHOLD = 1e-4
LOSSES = ("angular", "covariance", "head", "distill", "total", "linear_probe")


def _random_chol(rng, d) -> CholFactor:
    a = rng.standard_normal((d, d + 3))
    return cholesky_decompose(a @ a.T / d + 0.1 * np.eye(d))


def _angular(rng):
    d, n, c = 16, 8, 3
    ps = ParamStore()
    ps.add("tokens", rng.standard_normal((n, d)), trainable=True)
    ps.add("head", rng.standard_normal((d, c)), trainable=True)
    labels = rng.integers(0, c, n)
    return ps, lambda t: angular_penalty_loss(t.param("tokens"), labels, t.param("head"), 20.0)


def _covariance(rng):
    d, n = 12, 8
    labels = np.array([0, 0, 0, 1, 1, 1, 1, 2])
    old = rng.standard_normal((n, d))
    chol = {c: _random_chol(rng, d) for c in (0, 1, 2)}
    ps = ParamStore()
    ps.add("current", old + 0.5 * rng.standard_normal((n, d)), trainable=True)
    return ps, lambda t: covariance_calibration_loss(t.param("current"), old, labels, chol)


def _head(rng):
    d, n, c = 16, 8, 5
    samples = rng.standard_normal((n, d))
    labels = rng.integers(0, c, n)
    ps = ParamStore()
    ps.add("W", 0.5 * rng.standard_normal((d, c)), trainable=True)
    return ps, lambda t: head_retraining_loss(samples, labels, t.param("W"))


def _distill(rng):
    d, n, L = 16, 4, 6
    prev = rng.standard_normal((n, L, d))
    ps = ParamStore()
    ps.add("cls", rng.standard_normal((n, d)), trainable=True)
    ps.add("patches", prev + rng.standard_normal((n, L, d)), trainable=True)
    # the similarity weights carry no gradient, so finite differences must see them pinned
    w = distillation_weights(ps["cls"], ps["patches"])
    return ps, lambda t: patch_distillation_loss(t.param("cls"), t.param("patches"), prev, weights=w)


def _total(rng):
    """The combined objective through a two-block encoder with live LoRA factors."""
    cfg = BackboneConfig(input_dim=16, dim=16, depth=2, heads=2, patches=4, lora_rank=4)
    bb = init_backbone(cfg, "random_orthogonal", rng)
    bb.add_lora_for_task(1, rng)
    for n in bb.lora_names():
        bb.params.arrays[n] = 0.2 * rng.standard_normal(bb.params[n].shape)
    old = bb.snapshot()
    bb.add_lora_for_task(2, rng)
    for n in bb.trainable_lora_names(2):
        bb.params.arrays[n] = 0.2 * rng.standard_normal(bb.params[n].shape)
    bb.params.add("head.2", rng.standard_normal((16, 2)))
    bb.params.set_trainable(bb.trainable_lora_names(2) + ["head.2"])
    y_all = np.repeat([0, 1], 24)
    x_all = rng.standard_normal((48, 16)) + 2.0 * y_all[:, None]
    old_cls_all, _ = old.embed(x_all)
    stats = class_statistics(old_cls_all, y_all, (0, 1), eps_scale=1e-2)
    chol = {c: s.chol for c, s in stats.items()}
    idx = np.array([0, 1, 2, 3, 24, 25, 26, 27])
    x, y = x_all[idx], y_all[idx]
    old_cls, old_patch = old.embed(x)
    w = distillation_weights(*bb.embed(x))

    def fn(t):
        out = bb.forward_tokens(x, t)
        l_cls = angular_penalty_loss(out.class_token, y, t.param("head.2"), 20.0)
        l_cov = covariance_calibration_loss(out.class_token, old_cls, y, chol)
        l_pd = patch_distillation_loss(out.class_token, out.patch_tokens, old_patch, weights=w)
        return total_loss(l_cls, l_cov, l_pd, 0.4)

    return bb.params, fn


def _linear_probe(rng):
    # positive coefficients keep every partial derivative O(1), so round-off is the only error
    a = rng.uniform(0.5, 1.5, (5, 6))
    ps = ParamStore()
    ps.add("W", rng.uniform(-0.1, 0.1, (6, 3)), trainable=True)
    return ps, lambda t: ad.sum_(t.constant(a) @ t.param("W"))


_BUILDERS: dict[str, Callable] = {
    "angular": _angular,
    "covariance": _covariance,
    "head": _head,
    "distill": _distill,
    "total": _total,
    "linear_probe": _linear_probe,
}


def run_gradcheck(seed: int = 0, h: float = 1e-5, corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per loss; ``corrupt`` names a loss whose analytic gradient is sabotaged."""
    out = {}
    for i, name in enumerate(LOSSES):
        rng = np.random.default_rng([seed, i])
        params, fn = _BUILDERS[name](rng)
        out[name] = gradient_check(fn, params, h=h, coords_per_param=24, rng=rng, corrupt=name == corrupt)
    return out
