"""Dense float64 reverse-mode automatic differentiation on an explicit tape.

Everything the score models, losses, and the optimizer step need, and nothing
more: elementwise arithmetic with broadcasting, 2-D matmul, ReLU/softplus,
reductions, indexing, concatenation, and block placement. Values are numpy
arrays; a :class:`Tensor` is a value recorded on a :class:`Tape`. Operations
with no tracked operand fall through to plain numpy, so the same model code
runs traced (training) or untraced (evaluation, grid oracles).
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger("cro.autodiff")

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Parameter:
    """A named, trainable float64 array. Identity is the object itself."""

    __slots__ = ("name", "value")

    def __init__(self, value, name: str = ""):
        self.value = _asarray(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents: tuple[int, ...], backward, shape):
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Tensor:
    """A value recorded at index ``index`` on ``tape``."""

    __slots__ = ("data", "tape", "index")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, data: Array, tape: "Tape", index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape_index={self.index})"

    # arithmetic sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Ordered record of primitive ops; parents always precede children.

    One tape per forward pass; not thread-safe. ``backward`` fills per-node
    adjoint buffers, after which :meth:`grad` / :meth:`grad_of` read them.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._values: list[Array] = []
        self._adjoints: list[Array | None] = []
        self._param_nodes: dict[int, int] = {}  # id(Parameter) -> node index
        self._params: dict[int, Parameter] = {}

    def __len__(self):
        return len(self._nodes)

    def _record(self, value: Array, parents: tuple[int, ...], backward) -> Tensor:
        idx = len(self._nodes)
        self._nodes.append(_Node(parents, backward, value.shape))
        self._values.append(value)
        return Tensor(value, self, idx)

    def leaf(self, param: Parameter) -> Tensor:
        """Watch a parameter; repeated calls return the same node."""
        key = id(param)
        cached = self._param_nodes.get(key)
        if cached is not None:
            return Tensor(self._values[cached], self, cached)
        t = self._record(param.value, (), None)
        self._param_nodes[key] = t.index
        self._params[key] = param
        return t

    def watch(self, value) -> Tensor:
        """Watch a plain array (non-parameter input, e.g. a sample point)."""
        return self._record(_asarray(value), (), None)

    def backward(self, root: Tensor) -> None:
        """Reverse sweep from a scalar root; each node visited exactly once."""
        if root.tape is not self:
            raise ValueError("root tensor does not belong to this tape")
        if root.data.size != 1:
            raise ValueError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        n = len(self._nodes)
        adj: list[Array | None] = [None] * n
        adj[root.index] = np.ones_like(root.data)
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self._nodes[i]
            if node.backward is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                # adjoints are never mutated in place, so aliasing views is safe
                adj[p] = pg if adj[p] is None else adj[p] + pg
        self._adjoints = adj

    def grad(self, param: Parameter) -> Array | None:
        """Adjoint of ``param`` after :meth:`backward`; None if unused."""
        idx = self._param_nodes.get(id(param))
        if idx is None:
            return None
        g = self._adjoints[idx]
        return None if g is None else np.asarray(g)

    def grads(self, params: dict[str, Parameter]) -> dict[str, Array | None]:
        return {name: self.grad(p) for name, p in params.items()}

    def grad_of(self, t: Tensor) -> Array | None:
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self._adjoints[t.index]
        return None if g is None else np.asarray(g)


# ---------------------------------------------------------------------------
# primitive helpers


def value_of(x) -> Array:
    """Numeric value of a Tensor, Parameter, or array-like."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Parameter):
        return x.value
    return _asarray(x)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(name: str, fn, dfa, dfb, a, b):
    av, bv = value_of(a), value_of(b)
    try:
        out = fn(av, bv)
    except ValueError as exc:
        raise ShapeError(f"{name}: shapes {av.shape} and {bv.shape}: {exc}") from exc
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Tensor):
        parents.append(a.index)
        slots.append(0)
    if isinstance(b, Tensor):
        parents.append(b.index)
        slots.append(1)

    def backward(g):
        grads = [None, None]
        if 0 in slots:
            grads[0] = _unbroadcast(dfa(g, av, bv, out), av.shape)
        if 1 in slots:
            grads[1] = _unbroadcast(dfb(g, av, bv, out), bv.shape)
        return [grads[s] for s in slots]

    return tape._record(out, tuple(parents), backward)


def _unary(name: str, fn, df, a):
    av = value_of(a)
    out = fn(av)
    if not isinstance(a, Tensor):
        return out
    return a.tape._record(out, (a.index,), lambda g: (df(g, av, out),))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    return _binary("add", np.add, lambda g, *_: g, lambda g, *_: g, a, b)


def sub(a, b):
    return _binary("sub", np.subtract, lambda g, *_: g, lambda g, *_: -g, a, b)


def mul(a, b):
    return _binary(
        "mul", np.multiply, lambda g, av, bv, _: g * bv, lambda g, av, bv, _: g * av, a, b
    )


def div(a, b):
    return _binary(
        "div",
        np.divide,
        lambda g, av, bv, _: g / bv,
        lambda g, av, bv, out: -g * out / bv,
        a,
        b,
    )


def maximum(a, b):
    """Elementwise max; gradient goes to the first argument on ties."""
    return _binary(
        "maximum",
        np.maximum,
        lambda g, av, bv, _: g * (av >= bv),
        lambda g, av, bv, _: g * (av < bv),
        a,
        b,
    )


def relu(a):
    # subgradient at 0 defined as 0
    return _unary("relu", lambda v: np.maximum(v, 0.0), lambda g, v, _: g * (v > 0), a)


def softplus(a):
    def fn(v):
        # overflow-safe: softplus(v) = max(v, 0) + log1p(exp(-|v|))
        return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def df(g, v, _):
        return g / (1.0 + np.exp(-v))

    return _unary("softplus", fn, df, a)


def exp(a):
    return _unary("exp", np.exp, lambda g, v, out: g * out, a)


def log(a):
    return _unary("log", np.log, lambda g, v, _: g / v, a)


def sqrt(a):
    return _unary("sqrt", np.sqrt, lambda g, v, out: g / (2.0 * out), a)


def square(a):
    return _unary("square", np.square, lambda g, v, _: 2.0 * g * v, a)


def absolute(a):
    return _unary("abs", np.abs, lambda g, v, _: g * np.sign(v), a)


# ---------------------------------------------------------------------------
# matmul, reductions, structure


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    out = av @ bv

    def dfa2(g, av, bv, out):
        g = np.asarray(g)
        if av.ndim == 1 and bv.ndim == 1:  # dot
            return g * bv
        if av.ndim == 1:  # (k,) @ (k,m) -> (m,)
            return g @ bv.T
        if bv.ndim == 1:  # (n,k) @ (k,) -> (n,)
            return np.outer(g, bv)
        return g @ bv.T

    def dfb2(g, av, bv, out):
        g = np.asarray(g)
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        return av.T @ g

    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Tensor):
        parents.append(a.index)
        slots.append(0)
    if isinstance(b, Tensor):
        parents.append(b.index)
        slots.append(1)

    def backward(g):
        grads = [None, None]
        if 0 in slots:
            grads[0] = dfa2(g, av, bv, out)
        if 1 in slots:
            grads[1] = dfb2(g, av, bv, out)
        return [grads[s] for s in slots]

    return tape._record(np.asarray(out), tuple(parents), backward)


def _reduce(name, fn, df, a, axis, keepdims=False):
    av = value_of(a)
    out = fn(av, axis=axis, keepdims=keepdims)
    if not isinstance(a, Tensor):
        return out
    return a.tape._record(
        np.asarray(out), (a.index,), lambda g: (df(np.asarray(g), av, out),)
    )


def sum_(a, axis=None, keepdims=False):
    def df(g, av, out):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _reduce("sum", np.sum, df, a, axis, keepdims)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = av.size if axis is None else av.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return div(s, float(count))


def max_(a, axis=None, keepdims=False):
    """Max reduction; ties route the gradient to the first maximizer."""

    def df(g, av, out):
        if axis is None:
            mask = np.zeros(av.size)
            mask[int(np.argmax(av))] = 1.0
            return np.asarray(g) * mask.reshape(av.shape)
        idx = np.argmax(av, axis=axis)
        mask = np.zeros_like(av)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return mask * gg

    return _reduce("max", np.max, df, a, axis, keepdims)


def take(a, key):
    """Basic numpy indexing with scatter-add backward."""
    av = value_of(a)
    out = av[key]
    if not isinstance(a, Tensor):
        return out

    def backward(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return (full,)

    return a.tape._record(np.asarray(out), (a.index,), backward)


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not isinstance(a, Tensor):
        return out
    return a.tape._record(out, (a.index,), lambda g: (np.asarray(g).reshape(av.shape),))


def transpose(a):
    av = value_of(a)
    out = av.T
    if not isinstance(a, Tensor):
        return out
    return a.tape._record(
        np.asarray(out).copy(), (a.index,), lambda g: (np.asarray(g).T,)
    )


def concat(parts: Sequence, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents, slots = [], []
    for i, p in enumerate(parts):
        if isinstance(p, Tensor):
            parents.append(p.index)
            slots.append(i)

    def backward(g):
        g = np.asarray(g)
        pieces = []
        for i in slots:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return pieces

    return tape._record(out, tuple(parents), backward)


def scatter(a, shape: tuple[int, ...], flat_indices: Array):
    """Place the flat vector ``a`` into a zero array at ``flat_indices``."""
    av = value_of(a)
    out = np.zeros(shape)
    out.reshape(-1)[flat_indices] = av
    if not isinstance(a, Tensor):
        return out
    return a.tape._record(
        out, (a.index,), lambda g: (np.asarray(g).reshape(-1)[flat_indices],)
    )


def place_blocks(base: Array, blocks: Sequence[tuple[int, int, object]]):
    """Copy ``base`` and overwrite rectangular blocks at (row, col) offsets.

    Blocks may be Tensors; the backward pass slices the output adjoint back
    to each block. Overlapping blocks are not supported.
    """
    out = np.array(base, dtype=np.float64, copy=True)
    tape = _tape_of(*(b for _, _, b in blocks))
    for r, c, b in blocks:
        bv = np.atleast_2d(value_of(b))
        out[r : r + bv.shape[0], c : c + bv.shape[1]] = bv
    if tape is None:
        return out
    parents, specs = [], []
    for r, c, b in blocks:
        if isinstance(b, Tensor):
            parents.append(b.index)
            specs.append((r, c, np.atleast_2d(b.data).shape, b.data.shape))

    def backward(g):
        g = np.asarray(g)
        return [
            g[r : r + s2[0], c : c + s2[1]].reshape(orig) for r, c, s2, orig in specs
        ]

    return tape._record(out, tuple(parents), backward)


def solve_triangular_lower(L, d):
    """w = L^{-1} d for lower-triangular L and vector d.

    Backward: dL -> -(L^{-T} g) w^T, dd -> L^{-T} g.
    """
    from scipy.linalg import solve_triangular

    Lv, dv = value_of(L), value_of(d)
    if Lv.ndim != 2 or Lv.shape[0] != Lv.shape[1] or dv.shape != (Lv.shape[0],):
        raise ShapeError(f"solve_triangular_lower: {Lv.shape} \\ {dv.shape}")
    w = solve_triangular(Lv, dv, lower=True)
    tape = _tape_of(L, d)
    if tape is None:
        return w
    parents, slots = [], []
    if isinstance(L, Tensor):
        parents.append(L.index)
        slots.append(0)
    if isinstance(d, Tensor):
        parents.append(d.index)
        slots.append(1)

    def backward(g):
        gd = solve_triangular(Lv.T, np.asarray(g), lower=False)
        grads = [None, None]
        if 0 in slots:
            grads[0] = -np.outer(gd, w)
        if 1 in slots:
            grads[1] = gd
        return [grads[s] for s in slots]

    return tape._record(w, tuple(parents), backward)


def dot(a, b):
    return matmul(a, b)


def norm2(a, axis=None):
    """Euclidean norm composed from primitives (differentiable off 0)."""
    return sqrt(sum_(square(a), axis=axis))


def norm_inf(a, axis=None):
    return max_(absolute(a), axis=axis)


def where_mask(mask: Array, a, b):
    """mask * a + (1-mask) * b with a constant mask."""
    m = _asarray(mask)
    return add(mul(a, m), mul(b, 1.0 - m))


def assert_finite(name: str, x) -> None:
    v = value_of(x)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# optimizer


class ParamStore:
    """Named parameters plus Adam moment buffers and decoupled L2 decay."""

    def __init__(
        self,
        params: dict[str, Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, grads: dict[str, Array | None]) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                logger.warning("skipping Adam update for %r: non-finite gradient", name)
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update


def finite_difference_gradient(
    f: Callable[[Array], float], x0: Array, h: float = 1e-6
) -> Array:
    """Central finite differences of a scalar function; test oracle."""
    x0 = _asarray(x0)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * h)
    return g
