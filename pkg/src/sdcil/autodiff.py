"""Reverse-mode differentiation over the handful of ops the encoder and losses use.

Graphs are recorded define-by-run: a :class:`Tape` appends one :class:`Node` per
primitive, and :meth:`Tape.backward` walks the record in reverse.  Parameters
live in a :class:`ParamStore`; only names flagged trainable ever receive a
gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

GradSet = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class ParamStore:
    """Named float64 arrays with a trainable flag per name."""

    def __init__(self) -> None:
        self.arrays: dict[str, np.ndarray] = {}
        self.trainable: set[str] = set()

    def add(self, name: str, value: np.ndarray, trainable: bool = False) -> None:
        if name in self.arrays:
            raise KeyError(f"parameter {name!r} already registered")
        self.arrays[name] = np.array(value, dtype=np.float64, order="C")
        if trainable:
            self.trainable.add(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        missing = names - set(self.arrays)
        if missing:
            raise KeyError(f"unknown parameters: {sorted(missing)}")
        self.trainable = names

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.arrays = {k: v.copy() for k, v in self.arrays.items()}
        other.trainable = set(self.trainable)
        return other


class Node:
    __slots__ = ("tape", "index", "op", "value", "parents", "backward_fn", "requires_grad", "grad", "name")

    def __init__(self, tape, index, op, value, parents, backward_fn, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.op} shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive ops.

    With ``grad_enabled=False`` no backward closures are kept, which is how the
    frozen old network and evaluation passes run.
    """

    def __init__(self, params: ParamStore | None = None, grad_enabled: bool = True) -> None:
        self.params = params if params is not None else ParamStore()
        self.grad_enabled = grad_enabled
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    def _record(self, op, value, parents=(), backward_fn=None, name=None) -> Node:
        needs = self.grad_enabled and any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, value, tuple(parents), backward_fn if needs else None, needs, name)
        self.nodes.append(node)
        return node

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            value = self.params[name]
            node = Node(self, len(self.nodes), "param", value, (), None, False, name)
            node.requires_grad = self.grad_enabled and name in self.params.trainable
            self.nodes.append(node)
            self._param_nodes[name] = node
        return node

    def constant(self, value, name: str | None = None) -> Node:
        return self._record("const", np.asarray(value, dtype=np.float64), name=name)

    def backward(self, loss: Node) -> GradSet:
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, node #{loss.index} has shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        out: GradSet = {}
        for name, node in self._param_nodes.items():
            if name in self.params.trainable and node.requires_grad:
                out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only leading-axis broadcasting and size-1 axes are supported
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, tape: Tape, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op} node #{len(tape.nodes)}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast("add", t, a, b)
    sa, sb = a.shape, b.shape
    return t._record("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast("sub", t, a, b)
    sa, sb = a.shape, b.shape
    return t._record("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast("mul", t, a, b)
    av, bv = a.value, b.value
    return t._record(
        "mul", av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast("div", t, a, b)
    av, bv = a.value, b.value
    out = av / bv
    return t._record(
        "div", out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def scale(a: Node, c: float) -> Node:
    return a.tape._record("scale", a.value * c, (a,), lambda g: (g * c,))


def square(a: Node) -> Node:
    v = a.value
    return a.tape._record("square", v * v, (a,), lambda g: (2.0 * g * v,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._record("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    v = a.value
    return a.tape._record("log", np.log(v), (a,), lambda g: (g / v,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.tape._record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def abs_(a: Node) -> Node:
    v = a.value
    return a.tape._record("abs", np.abs(v), (a,), lambda g: (g * np.sign(v),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape._record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Node) -> Node:
    """tanh approximation of GELU."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return a.tape._record("gelu", out, (a,), backward)


def stop_gradient(a: Node) -> Node:
    """Pass the value forward; contribute nothing backward."""
    return a.tape._record("stopgrad", a.value, (), None)


# -- reductions and shape ----------------------------------------------------


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return a.tape._record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Node, axes: Sequence[int]) -> Node:
    inv = np.argsort(axes)
    return a.tape._record("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Node], axis: int) -> Node:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return t._record("concat", np.concatenate([x.value for x in xs], axis=axis), xs,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(a: Node, index: np.ndarray) -> Node:
    """Gather along axis 0; duplicates accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape._record("take_rows", a.value[index], (a,), backward)


def select(a: Node, key) -> Node:
    """Basic (slice) indexing."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return a.tape._record("select", a.value[key], (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul node #{len(t.nodes)}: cannot multiply {av.shape} by {bv.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return t._record("matmul", av @ bv, (a, b), backward)


def whiten_rows(a: Node, lower: np.ndarray) -> Node:
    """Rows ``v`` mapped to ``L^{-1} v`` for a constant lower-triangular ``L``."""
    out = solve_triangular(lower, a.value.T, lower=True, check_finite=False).T

    def backward(g):
        return (solve_triangular(lower, g.T, lower=True, trans="T", check_finite=False).T,)

    return a.tape._record("whiten", out, (a,), backward)


def row_norm(a: Node) -> Node:
    """Euclidean norm over the last axis; the subgradient at zero is taken as 0."""
    v = a.value
    out = np.sqrt(np.sum(v * v, axis=-1))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (g[..., None] * np.where(out[..., None] > 0, v / safe[..., None], 0.0),)

    return a.tape._record("row_norm", out, (a,), backward)


def l2_normalize(a: Node, axis: int = -1) -> Node:
    v = a.value
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError(f"l2_normalize node #{len(a.tape.nodes)}: zero-norm vector")
    u = v / norm

    def backward(g):
        return ((g - u * np.sum(g * u, axis=axis, keepdims=True)) / norm,)

    return a.tape._record("l2_normalize", u, (a,), backward)


def layernorm(a: Node, eps: float = 1e-6) -> Node:
    """Normalize the last axis to zero mean and unit variance (no affine terms)."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        return (rstd * (g - gm - y * gy),)

    return a.tape._record("layernorm", y, (a,), backward)


def softmax(a: Node, axis: int = -1) -> Node:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return a.tape._record("softmax", p, (a,), backward)


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    x = logits.value
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy node #{len(logits.tape.nodes)}: logits {x.shape}, labels {labels.shape}")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    n = x.shape[0]
    rows = np.arange(n)
    loss = np.mean(lse - x[rows, labels])

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return logits.tape._record("cross_entropy", np.asarray(loss), (logits,), backward)


# -- evaluation and verification ----------------------------------------------


LossFn = Callable[[Tape], Node]


def forward_eval(fn: LossFn, params: ParamStore) -> np.ndarray:
    tape = Tape(params, grad_enabled=False)
    return np.array(fn(tape).value, copy=True)


def backward_grad(fn: LossFn, params: ParamStore) -> tuple[float, GradSet]:
    tape = Tape(params)
    loss = fn(tape)
    grads = tape.backward(loss)
    return float(loss.value), grads


def gradient_check(
    fn: LossFn,
    params: ParamStore,
    names: Iterable[str] | None = None,
    h: float = 1e-5,
    coords_per_param: int | None = 16,
    rng: np.random.Generator | None = None,
    corrupt: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.  Only trainable
    names are compared; when none are left the error is 0.  ``corrupt`` scales
    the analytic gradient and exists to self-test the harness.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = backward_grad(fn, params)
    names = sorted(grads) if names is None else [n for n in names if n in grads]
    worst = 0.0
    for name in names:
        arr = params.arrays[name]
        analytic = grads[name] * (1.5 if corrupt else 1.0)
        flat_idx = np.arange(arr.size)
        if coords_per_param is not None and arr.size > coords_per_param:
            flat_idx = rng.choice(arr.size, size=coords_per_param, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(forward_eval(fn, params))
            arr[idx] = orig - h
            fm = float(forward_eval(fn, params))
            arr[idx] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
