"""Frozen token encoder with LoRA-adapted key/value projections.

Raw feature vectors are cut into ``patches`` equal blocks, block ``j`` is mapped
to ``dim`` by its own frozen projection and a class token is prepended.  The encoder is a stack of
pre-norm attention blocks; only the key and value projections carry LoRA factors.

Composition rules for an adapted base weight ``W0`` after ``t`` tasks:

* ``task_specific``: ``W0 + sum_i B_i A_i``
* ``task_shared``:   ``W0 + B A``
* ``hybrid``:        ``W0 + sum_i B_i A`` (one ``A`` shared by all tasks)
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape
from .snapshot import read_tensors, write_tensors

WEIGHTS_MAGIC = b"SDCW"
ADAPTED = ("wk", "wv")
CLS_INIT_STD = 0.02


class LoRAStructure(str, Enum):
    TASK_SPECIFIC = "task_specific"
    TASK_SHARED = "task_shared"
    HYBRID = "hybrid"


class PretrainMode(str, Enum):
    RANDOM_ORTHOGONAL = "random_orthogonal"
    WARMUP_SPLIT = "warmup_split"


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int = 32
    dim: int = 32
    depth: int = 2
    heads: int = 2
    patches: int = 16
    lora_rank: int = 8
    lora_structure: LoRAStructure = LoRAStructure.TASK_SPECIFIC
    mlp_ratio: int = 2
    use_pos_embed: bool = True
    # hybrid only: keep training the shared A after the first task
    hybrid_train_shared: bool = True
    # std of the Gaussian draw for every new A factor (B starts at zero)
    lora_init_std: float = 0.02
    pos_init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "lora_structure", LoRAStructure(self.lora_structure))
        if self.depth < 1 or self.patches < 1 or self.heads < 1:
            raise ValueError("depth, patches and heads must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.input_dim % self.patches:
            raise ValueError(f"input_dim {self.input_dim} not divisible by patches {self.patches}")
        if not 1 <= self.lora_rank <= self.dim // 2:
            raise ValueError(f"lora_rank must be in [1, dim/2], got {self.lora_rank}")
        if self.lora_init_std < 0 or self.pos_init_std < 0:
            raise ValueError("init std must be >= 0")

    @property
    def patch_size(self) -> int:
        return self.input_dim // self.patches

    def header_fields(self) -> dict[str, object]:
        out = asdict(self)
        out["lora_structure"] = self.lora_structure.value
        return out


class TokenOutput:
    """Final-layer class token ``(B, d)`` and patch tokens ``(B, L, d)`` as tape nodes."""

    __slots__ = ("class_token", "patch_tokens")

    def __init__(self, class_token: ad.Node, patch_tokens: ad.Node):
        self.class_token = class_token
        self.patch_tokens = patch_tokens


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # orthonormal columns when rows >= cols, orthonormal rows otherwise
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


class Backbone:
    """Frozen base weights plus LoRA factors, all held in one :class:`ParamStore`."""

    def __init__(self, cfg: BackboneConfig, params: ParamStore, tasks: int = 0):
        self.cfg = cfg
        self.params = params
        self.tasks = tasks

    # -- structure ---------------------------------------------------------

    def base_names(self) -> list[str]:
        return [n for n in self.params.names() if not n.startswith(("lora.", "head."))]

    def lora_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("lora.")]

    def trainable_lora_names(self, t: int) -> list[str]:
        s = self.cfg.lora_structure
        if s is LoRAStructure.TASK_SHARED:
            return [n for n in self.params.names() if n.startswith("lora.")]
        names = [n for n in self.params.names() if n.startswith("lora.") and n.endswith(f".{t}")]
        if s is LoRAStructure.HYBRID and (self.cfg.hybrid_train_shared or t == 1):
            names += [n for n in self.params.names() if n.startswith("lora.") and n.endswith(".A.shared")]
        return names

    def add_lora_for_task(self, t: int, rng: np.random.Generator) -> None:
        if t != self.tasks + 1:
            raise ValueError(f"expected task {self.tasks + 1}, got {t}")
        d, r = self.cfg.dim, self.cfg.lora_rank
        s = self.cfg.lora_structure
        for b in range(self.cfg.depth):
            for proj in ADAPTED:
                k = self.params[f"blocks.{b}.{proj}"].shape[1]
                prefix = f"lora.{b}.{proj}"
                if s is LoRAStructure.TASK_SPECIFIC:
                    self.params.add(f"{prefix}.B.{t}", np.zeros((d, r)))
                    self.params.add(f"{prefix}.A.{t}", self.cfg.lora_init_std * rng.standard_normal((r, k)))
                elif s is LoRAStructure.TASK_SHARED:
                    if t == 1:
                        self.params.add(f"{prefix}.B.shared", np.zeros((d, r)))
                        self.params.add(f"{prefix}.A.shared", self.cfg.lora_init_std * rng.standard_normal((r, k)))
                else:
                    self.params.add(f"{prefix}.B.{t}", np.zeros((d, r)))
                    if t == 1:
                        self.params.add(f"{prefix}.A.shared", self.cfg.lora_init_std * rng.standard_normal((r, k)))
        self.tasks = t

    def _terms(self, b: int, proj: str, t: int) -> list[tuple[str, str]]:
        prefix = f"lora.{b}.{proj}"
        s = self.cfg.lora_structure
        if s is LoRAStructure.TASK_SHARED:
            return [(f"{prefix}.B.shared", f"{prefix}.A.shared")]
        a_tag = "{i}" if s is LoRAStructure.TASK_SPECIFIC else "shared"
        return [(f"{prefix}.B.{i}", f"{prefix}.A.{a_tag.format(i=i)}") for i in range(1, t + 1)]

    def _check_t(self, t: int) -> None:
        if not 0 <= t <= self.tasks:
            raise ValueError(f"task index {t} out of range [0, {self.tasks}]")

    def effective_weights(self, t: int | None = None) -> dict[str, np.ndarray]:
        t = self.tasks if t is None else t
        self._check_t(t)
        out = {}
        for b in range(self.cfg.depth):
            for proj in ADAPTED:
                w = self.params[f"blocks.{b}.{proj}"].copy()
                if t > 0:
                    for bn, an in self._terms(b, proj, t):
                        w += self.params[bn] @ self.params[an]
                out[f"blocks.{b}.{proj}"] = w
        return out

    def _adapted_node(self, tape: Tape, b: int, proj: str, t: int) -> ad.Node:
        base = f"blocks.{b}.{proj}"
        const = self.params[base].copy()
        live: list[tuple[str, str]] = []
        trainable = tape.params.trainable if tape.grad_enabled else set()
        for bn, an in self._terms(b, proj, t) if t > 0 else []:
            if bn in trainable or an in trainable:
                live.append((bn, an))
            else:
                const += self.params[bn] @ self.params[an]
        w = tape.constant(const) if base not in trainable else tape.param(base) + tape.constant(const - self.params[base])
        if not live:
            return w
        if self.cfg.lora_structure is LoRAStructure.HYBRID:
            an = live[0][1]
            bsum = tape.param(live[0][0])
            for bn, _ in live[1:]:
                bsum = bsum + tape.param(bn)
            return w + bsum @ tape.param(an)
        for bn, an in live:
            w = w + tape.param(bn) @ tape.param(an)
        return w

    # -- forward -----------------------------------------------------------

    def forward_tokens(self, x: np.ndarray, tape: Tape, t: int | None = None) -> TokenOutput:
        t = self.tasks if t is None else t
        self._check_t(t)
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ad.ShapeError(f"input has shape {x.shape}, expected (batch, {cfg.input_dim})")
        n, d, h = x.shape[0], cfg.dim, cfg.heads
        dh = d // h

        def p(name):
            return tape.param(name) if name in tape.params.trainable and tape.grad_enabled else tape.constant(self.params[name])

        patches = x.reshape(n, cfg.patches, cfg.patch_size)
        tok = ad.reshape(
            ad.matmul(tape.constant(patches.transpose(1, 0, 2)), p("patch_proj")), (cfg.patches, n, d)
        )
        tok = ad.transpose(tok, (1, 0, 2))
        cls = ad.reshape(p("cls_token"), (1, 1, d))
        cls = ad.add(tape.constant(np.zeros((n, 1, d))), cls)
        z = ad.concat([cls, tok], axis=1)
        if cfg.use_pos_embed:
            z = z + p("pos_embed")
        seq = cfg.patches + 1
        for b in range(cfg.depth):
            hn = ad.layernorm(z)
            q = hn @ p(f"blocks.{b}.wq")
            k = hn @ self._adapted_node(tape, b, "wk", t)
            v = hn @ self._adapted_node(tape, b, "wv", t)
            q, k, v = (ad.transpose(ad.reshape(m, (n, seq, h, dh)), (0, 2, 1, 3)) for m in (q, k, v))
            att = ad.softmax(ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh)))
            o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (n, seq, d))
            z = z + o @ p(f"blocks.{b}.wo")
            hn = ad.layernorm(z)
            z = z + ad.gelu(hn @ p(f"blocks.{b}.w1")) @ p(f"blocks.{b}.w2")
        z = ad.layernorm(z)
        return TokenOutput(ad.select(z, (slice(None), 0)), ad.select(z, (slice(None), slice(1, None))))

    def embed(self, x: np.ndarray, t: int | None = None, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Class and patch tokens as arrays, no gradient bookkeeping."""
        x = np.asarray(x, dtype=np.float64)
        cls_out, patch_out = [], []
        for i in range(0, max(len(x), 1), chunk):
            tape = Tape(self.params, grad_enabled=False)
            out = self.forward_tokens(x[i : i + chunk], tape, t)
            cls_out.append(out.class_token.value)
            patch_out.append(out.patch_tokens.value)
        return np.concatenate(cls_out), np.concatenate(patch_out)

    # -- bookkeeping -------------------------------------------------------

    def snapshot(self) -> "Backbone":
        """Independent frozen copy (the old network during the next task)."""
        params = self.params.copy()
        params.trainable = set()
        return Backbone(self.cfg, params, self.tasks)

    def checksum(self, names: list[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.base_names() if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n]).tobytes())
        return h.hexdigest()

    def save(self, path, fingerprint: str = "") -> None:
        header = {"fingerprint": fingerprint, "tasks": self.tasks, **self.cfg.header_fields()}
        names = [n for n in self.params.names() if not n.startswith("head.")]
        write_tensors(path, WEIGHTS_MAGIC, header, {n: self.params[n] for n in names})

    @classmethod
    def load(cls, path, expected_fingerprint: str | None = None) -> "Backbone":
        header, tensors = read_tensors(path, WEIGHTS_MAGIC, expected_fingerprint)
        field_types = {f: type(v) for f, v in BackboneConfig().header_fields().items()}
        kwargs = {}
        for k, typ in field_types.items():
            raw = header[k]
            kwargs[k] = raw == "True" if typ is bool else typ(raw)
        params = ParamStore()
        for n, arr in tensors.items():
            params.add(n, arr)
        return cls(BackboneConfig(**kwargs), params, int(header["tasks"]))


def init_backbone(
    cfg: BackboneConfig,
    mode: PretrainMode | str,
    rng: np.random.Generator,
    pretrain_data: tuple[np.ndarray, np.ndarray] | None = None,
    warmup_epochs: int = 30,
) -> Backbone:
    """Draw frozen base weights; ``warmup_split`` also trains them on a held-out split.

    Base matrices are drawn orthogonal.  In warmup mode they are then fitted
    with a throwaway cosine head on ``pretrain_data`` (``(x, labels)``; a
    synthetic split is generated when omitted) and frozen.
    """
    mode = PretrainMode(mode)
    d, ps = cfg.dim, cfg.patch_size
    params = ParamStore()
    # one projection per patch position: a block-diagonal linear map of the input
    params.add("patch_proj", np.stack([_orthogonal(rng, ps, d) for _ in range(cfg.patches)]) * np.sqrt(d / ps))
    params.add("cls_token", CLS_INIT_STD * rng.standard_normal(d))
    params.add("pos_embed", cfg.pos_init_std * rng.standard_normal((cfg.patches + 1, d)))
    hidden = cfg.mlp_ratio * d
    for b in range(cfg.depth):
        for name in ("wq", "wk", "wv", "wo"):
            params.add(f"blocks.{b}.{name}", _orthogonal(rng, d, d))
        params.add(f"blocks.{b}.w1", _orthogonal(rng, d, hidden))
        params.add(f"blocks.{b}.w2", _orthogonal(rng, hidden, d))
    bb = Backbone(cfg, params)
    if mode is PretrainMode.WARMUP_SPLIT:
        if pretrain_data is None:
            from .data import SynthSpec, generate_samples

            pretrain_data = generate_samples(
                SynthSpec(classes=10, input_dim=cfg.input_dim, per_class=40, seed=int(rng.integers(2**31)))
            )
        _warmup(bb, *pretrain_data, epochs=warmup_epochs, rng=rng)
    return bb


def _warmup(bb: Backbone, x: np.ndarray, y: np.ndarray, epochs: int, rng: np.random.Generator,
            lr: float = 0.05, batch: int = 32, scale: float = 10.0) -> None:
    classes = np.unique(y)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in y])
    bb.params.add("head.warmup", 0.1 * rng.standard_normal((bb.cfg.dim, len(classes))))
    base = bb.base_names()
    bb.params.set_trainable(base + ["head.warmup"])
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch):
            idx = order[i : i + batch]
            tape = Tape(bb.params)
            out = bb.forward_tokens(x[idx], tape, 0)
            f = ad.l2_normalize(out.class_token)
            w = ad.l2_normalize(tape.param("head.warmup"), axis=0)
            loss = ad.cross_entropy(ad.scale(f @ w, scale), labels[idx])
            for n, g in tape.backward(loss).items():
                bb.params.arrays[n] -= lr * g
    del bb.params.arrays["head.warmup"]
    bb.params.set_trainable([])
