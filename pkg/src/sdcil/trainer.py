"""The incremental loop: train a task, move old prototypes, realign heads, evaluate."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .backbone import Backbone, BackboneConfig, PretrainMode, init_backbone
from .data import SynthSpec, TaskStream, Task, generate_samples
from .drift import (
    ClassStats,
    StatsStore,
    TaskCovariance,
    class_statistics,
    compensate_all_means,
    compute_class_mean,
    estimate_mean_shift,
)
from .linalg import cholesky_decompose, regularize_covariance, sample_gaussian
from .losses import (
    angular_penalty_loss,
    cosine_logits,
    covariance_calibration_loss,
    head_retraining_loss,
    patch_distillation_loss,
    total_loss,
)

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_first: int = 20
    epochs_later: int = 10
    batch_size: int = 16
    lr: float = 0.01
    # learning rate for sessions after the first; None means ``lr``
    lr_later: float | None = None
    lam: float = 0.4
    s: float = 20.0
    sigma: float = 1.0
    samples_per_class: int = 64
    head_epochs: int = 10
    head_lr: float = 0.01
    eps_scale: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_first", "epochs_later", "batch_size", "samples_per_class", "head_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0 or (self.lr_later is not None and self.lr_later < 0) or self.head_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not self.s > 0 or not self.sigma > 0 or self.lam < 0:
            raise ValueError("need s > 0, sigma > 0, lam >= 0")


@dataclass(frozen=True)
class Ablation:
    msc: bool = True
    cc: bool = True
    pd: bool = True
    align: bool = True

    @property
    def name(self) -> str:
        for k, v in EXPERIMENTS.items():
            if v == self:
                return k
        return f"msc={int(self.msc)},cc={int(self.cc)},pd={int(self.pd)},align={int(self.align)}"


EXPERIMENTS = {
    "exp-I": Ablation(msc=False, cc=False, pd=False),
    "exp-II": Ablation(msc=True, cc=False, pd=False),
    "exp-III": Ablation(msc=False, cc=True, pd=False),
    "exp-IV": Ablation(msc=True, cc=True, pd=False),
    "exp-V": Ablation(msc=True, cc=True, pd=True),
}


@dataclass
class RunReport:
    accuracy: list[list[float]]
    A_last: float
    A_avg: float
    wall_ms: list[float]
    fingerprint: str
    seed: int
    ablation: str
    align_old_before: list[float | None] = field(default_factory=list)
    align_old_after: list[float | None] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)
    oracle: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_schedule(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def evaluate_metrics(accuracy: list[list[float]]) -> tuple[float, float]:
    """``A_last`` (mean of the final row) and ``A_avg`` (mean of all row means)."""
    if not accuracy:
        raise ValueError("empty accuracy matrix")
    means = [sum(row) / len(row) for row in accuracy]
    return means[-1], sum(means) / len(means)


@dataclass
class OldContext:
    """Frozen previous network outputs on the current task's training data."""

    cls_tokens: np.ndarray
    patch_tokens: np.ndarray
    stats: dict[int, TaskCovariance]


class IncrementalLearner:
    def __init__(self, backbone: Backbone, cfg: TrainConfig):
        self.backbone = backbone
        self.cfg = cfg
        self.task_classes: list[list[int]] = []
        self.store = StatsStore()

    @property
    def params(self):
        return self.backbone.params

    def head_names(self) -> list[str]:
        return [f"head.{i + 1}" for i in range(len(self.task_classes))]

    def seen_classes(self) -> list[int]:
        return [c for cls in self.task_classes for c in cls]

    def begin_task(self, classes: list[int], rng: np.random.Generator) -> int:
        t = len(self.task_classes) + 1
        self.backbone.add_lora_for_task(t, rng)
        w = rng.standard_normal((self.backbone.cfg.dim, len(classes)))
        self.params.add(f"head.{t}", w / np.linalg.norm(w, axis=0))
        self.task_classes.append(list(classes))
        return t

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Concatenated cosine scores of every head; no task id needed."""
        feats, _ = self.backbone.embed(x)
        tape = Tape(self.params, grad_enabled=False)
        heads = ad.concat([tape.constant(self.params[n]) for n in self.head_names()], axis=1)
        return cosine_logits(tape.constant(feats), heads, 1.0).value

    def predict(self, x: np.ndarray) -> np.ndarray:
        seen = np.array(self.seen_classes())
        return seen[np.argmax(self.scores(x), axis=1)]


def _local_labels(y: np.ndarray, classes: list[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[int(c)] for c in y], dtype=np.int64)


def train_task(
    learner: IncrementalLearner,
    task: Task,
    t: int,
    ablation: Ablation,
    old: OldContext | None,
    rng: np.random.Generator,
) -> list[float]:
    """SGD on ``L_cls + L_cov + lam * L_distill`` for one session.

    Only the task's LoRA factors and its head move.  The calibration and
    distillation terms need ``old`` and are skipped for the first session.
    """
    cfg = learner.cfg
    bb = learner.backbone
    params = learner.params
    params.set_trainable(bb.trainable_lora_names(t) + [f"head.{t}"])
    epochs = cfg.epochs_first if t == 1 else cfg.epochs_later
    lr = cfg.lr if t == 1 or cfg.lr_later is None else cfg.lr_later
    n = len(task.x_train)
    labels = _local_labels(task.y_train, task.classes)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    use_cov = ablation.cc and old is not None
    use_pd = ablation.pd and old is not None
    chol = {c: st.chol for c, st in old.stats.items()} if use_cov else {}
    curve = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            tape = Tape(params)
            try:
                with np.errstate(over="ignore"):
                    out = bb.forward_tokens(task.x_train[idx], tape, t)
                    l_cls = angular_penalty_loss(out.class_token, labels[idx], tape.param(f"head.{t}"), cfg.s)
                l_cov = covariance_calibration_loss(out.class_token, old.cls_tokens[idx], task.y_train[idx], chol) if use_cov else 0.0
                l_pd = patch_distillation_loss(out.class_token, out.patch_tokens, old.patch_tokens[idx]) if use_pd else 0.0
            except ValueError as exc:
                # shapes are fixed before training, so a failure here is an overflowed or collapsed token
                raise NumericalAbort(f"degenerate forward in session {t}, step {step} (batch {b}), lr {lr}: {exc}") from exc
            loss = total_loss(l_cls, l_cov, l_pd, cfg.lam)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericalAbort(f"non-finite loss {value} in session {t}, step {step} (batch {b}), lr {lr}")
            grads = tape.backward(loss)
            eta = cosine_schedule(lr, step, total_steps)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericalAbort(f"non-finite gradient for {name} in session {t}, batch {b}, lr {lr}")
                params.arrays[name] -= eta * g
                if not np.all(np.isfinite(params.arrays[name])):
                    raise NumericalAbort(f"{name} left the finite range in session {t}, step {step} (batch {b}), lr {lr}")
            epoch_loss += value * len(idx)
            step += 1
        curve.append(epoch_loss / n)
    params.set_trainable([])
    return curve


def align_classifier(learner: IncrementalLearner, rng: np.random.Generator) -> None:
    """Retrain every head on samples drawn from the stored class Gaussians."""
    cfg = learner.cfg
    seen = learner.seen_classes()
    missing = [c for c in seen if c not in learner.store]
    if missing:
        raise KeyError(f"no statistics for classes {missing}")
    xs, ys = [], []
    for k, c in enumerate(seen):
        st = learner.store[c]
        chol = cholesky_decompose(regularize_covariance(st.cov, cfg.eps_scale))
        xs.append(sample_gaussian(st.mean, chol, cfg.samples_per_class, rng))
        ys.append(np.full(cfg.samples_per_class, k))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    heads = learner.head_names()
    learner.params.set_trainable(heads)
    n = len(x)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.head_epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.head_epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            tape = Tape(learner.params)
            w = ad.concat([tape.param(h) for h in heads], axis=1)
            loss = head_retraining_loss(x[idx], y[idx], w, s=cfg.s)
            grads = tape.backward(loss)
            eta = cosine_schedule(cfg.head_lr, step, total)
            for name, g in grads.items():
                learner.params.arrays[name] -= eta * g
            step += 1
    learner.params.set_trainable([])


def evaluate_session(learner: IncrementalLearner, stream: TaskStream, t: int) -> list[float]:
    """Accuracy (%) on the test split of each task ``1..t``."""
    accs = []
    for task in stream.tasks[:t]:
        pred = learner.predict(task.x_test)
        accs.append(100.0 * float(np.mean(pred == task.y_test)))
    return accs


def _fresh_stats(cls_tokens, y, classes, session, eps_scale) -> dict[int, ClassStats]:
    stats = class_statistics(cls_tokens, y, classes, eps_scale)
    return {c: ClassStats(c, s.mean, s.cov, int(np.sum(y == c)), session) for c, s in stats.items()}


def run_cil(
    stream: TaskStream,
    bcfg: BackboneConfig,
    cfg: TrainConfig,
    ablation: Ablation = Ablation(),
    pretrain_mode: PretrainMode | str = PretrainMode.RANDOM_ORTHOGONAL,
    fingerprint: str = "",
    oracle: bool = False,
    oracle_sigmas: tuple[float, ...] = (),
    record_timing: bool = False,
) -> tuple[RunReport, IncrementalLearner]:
    """Run every session of ``stream`` and return the report and final learner.

    With ``oracle=True`` the training data of finished tasks is kept so each
    old prototype can be compared with its true mean under the current network.
    """
    stream.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    init_rng, lora_rng, train_rng, align_rng, pre_rng = (np.random.default_rng(s) for s in seeds)
    pretrain = None
    if PretrainMode(pretrain_mode) is PretrainMode.WARMUP_SPLIT:
        pretrain = generate_samples(
            SynthSpec(classes=10, input_dim=bcfg.input_dim, per_class=40, seed=int(pre_rng.integers(2**31)))
        )
    learner = IncrementalLearner(init_backbone(bcfg, pretrain_mode, init_rng, pretrain), cfg)
    frozen_sum = learner.backbone.checksum()
    uncompensated: dict[int, np.ndarray] = {}
    accuracy: list[list[float]] = []
    report = RunReport([], 0.0, 0.0, [], fingerprint, cfg.seed, ablation.name)

    for t, task in enumerate(stream.tasks, start=1):
        start = time.perf_counter()
        prev = learner.backbone.snapshot() if t > 1 else None
        old = None
        if prev is not None:
            old_cls, old_patch = prev.embed(task.x_train)
            stats = class_statistics(old_cls, task.y_train, task.classes, cfg.eps_scale)
            old = OldContext(old_cls, old_patch, stats)
            old_sum = prev.checksum(prev.params.names())
        learner.begin_task(task.classes, lora_rng)
        curve = train_task(learner, task, t, ablation, old, train_rng)
        report.final_loss.append(curve[-1])
        if prev is not None and prev.checksum(prev.params.names()) != old_sum:
            raise RuntimeError("old network changed during training")

        new_cls, _ = learner.backbone.embed(task.x_train)
        shifts = {}
        if old is not None and ablation.msc:
            for c in learner.store.class_ids():
                shifts[c] = estimate_mean_shift(old.cls_tokens, new_cls, learner.store[c].mean, cfg.sigma)
        before = learner.store
        fresh = _fresh_stats(new_cls, task.y_train, task.classes, t, cfg.eps_scale)
        learner.store = compensate_all_means(learner.store, shifts, t, fresh)
        for c in task.classes:
            uncompensated[c] = fresh[c].mean.copy()

        if oracle and t > 1:
            for j, old_task in enumerate(stream.tasks[: t - 1], start=1):
                emb, _ = learner.backbone.embed(old_task.x_train)
                for c in old_task.classes:
                    truth = compute_class_mean(emb, old_task.y_train, c)
                    cell = {
                        "class": c,
                        "session": t,
                        "learned": j,
                        "err_compensated": float(np.linalg.norm(learner.store[c].mean - truth)),
                        "err_previous": float(np.linalg.norm(before[c].mean - truth)),
                        "err_uncompensated": float(np.linalg.norm(uncompensated[c] - truth)),
                    }
                    if oracle_sigmas and old is not None:
                        cell["sigma_sweep"] = {
                            repr(s): float(np.linalg.norm(
                                before[c].mean + estimate_mean_shift(old.cls_tokens, new_cls, before[c].mean, s).delta - truth))
                            for s in oracle_sigmas
                        }
                    report.oracle.append(cell)

        if ablation.align:
            pre_align = evaluate_session(learner, stream, t)
            align_classifier(learner, align_rng)
            accs = evaluate_session(learner, stream, t)
            if t > 1:
                report.align_old_before.append(float(np.mean(pre_align[:-1])))
                report.align_old_after.append(float(np.mean(accs[:-1])))
        else:
            accs = evaluate_session(learner, stream, t)
        accuracy.append(accs)
        report.wall_ms.append(round(1000 * (time.perf_counter() - start), 3) if record_timing else 0.0)
        log.info("session %d/%d %s: %s", t, stream.T, ablation.name, " ".join(f"{a:.1f}" for a in accs))

    if learner.backbone.checksum() != frozen_sum:
        raise RuntimeError("frozen base weights changed during the run")
    report.accuracy = accuracy
    report.A_last, report.A_avg = evaluate_metrics(accuracy)
    return report, learner
