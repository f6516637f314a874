"""Float64 tensors with a tape-based reverse-mode autodiff, plus a portable PRNG.

Every operation takes :class:`Var` (or plain arrays/scalars, treated as
constants) and returns a new :class:`Var`.  Operations whose inputs require a
gradient are appended to their :class:`Graph` in evaluation order, so the tape
is topologically sorted by construction and ``backward`` is a single reverse
sweep.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
FD_STEP = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class GradError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "graph", "parents", "backward_fn", "requires_grad", "trainable", "grad", "__weakref__")

    def __init__(self, value, graph, parents=(), backward_fn=None, requires_grad=False, trainable=False):
        self.value = value
        self.graph = graph
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

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
        return mul(self, 1.0 / other) if not isinstance(other, Var) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Graph:
    """Tape of recorded primitives; one instance per forward/backward pass."""

    def __init__(self, dtype=DTYPE):
        self.dtype = dtype
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value, trainable=False) -> Var:
        v = Var(np.asarray(value, dtype=self.dtype), self, requires_grad=trainable, trainable=trainable)
        if trainable:
            self.leaves.append(v)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=self.dtype), self)

    def record(self, value, parents: Sequence[Var], backward_fn) -> Var:
        """Append a primitive.  ``backward_fn(g)`` returns one gradient (or None) per parent."""
        needs = any(p.requires_grad for p in parents)
        out = Var(value, self, tuple(parents), backward_fn if needs else None, needs)
        if needs:
            self.nodes.append(out)
        return out

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        if loss.value.size != 1:
            raise GradError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.value)
            leaf.grad = np.asarray(g, dtype=leaf.value.dtype).reshape(leaf.value.shape)
            out[leaf] = leaf.grad
        # single-use tape; dropping it breaks the graph <-> var cycle so memory is freed at once
        self.nodes = []
        return out


def backward(graph: Graph, loss: Var) -> dict[Var, np.ndarray]:
    return graph.backward(loss)


# ---------------------------------------------------------------------------
# primitives


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Var):
            return x.graph
    raise TypeError("at least one operand must be a Var")


def _as_var(x, graph: Graph) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=graph.dtype), graph)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _as_var(a, g), _as_var(b, g)
    sa, sb = a.value.shape, b.value.shape
    return g.record(a.value + b.value, (a, b), lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)))


def sub(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _as_var(a, g), _as_var(b, g)
    sa, sb = a.value.shape, b.value.shape
    return g.record(a.value - b.value, (a, b), lambda gr: (_unbroadcast(gr, sa), _unbroadcast(-gr, sb)))


def mul(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _as_var(a, g), _as_var(b, g)
    av, bv = a.value, b.value

    def bw(gr):
        ga = _unbroadcast(gr * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(gr * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return g.record(av * bv, (a, b), bw)


def div(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _as_var(a, g), _as_var(b, g)
    av, bv = a.value, b.value
    out = av / bv

    def bw(gr):
        ga = _unbroadcast(gr / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-gr * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return g.record(out, (a, b), bw)


def matmul(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _as_var(a, g), _as_var(b, g)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(gr):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(gr @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ gr.reshape(-1, gr.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ gr, bv.shape)
        return ga, gb

    return g.record(av @ bv, (a, b), bw)


def sum_(x: Var, axis=None, keepdims=False) -> Var:
    shape = x.value.shape

    def bw(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, shape).copy(),)

    return x.graph.record(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Var, axis=None, keepdims=False) -> Var:
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return x.graph.record(out, (x,), lambda gr: (gr * out,))


def log(x: Var) -> Var:
    xv = x.value
    return x.graph.record(np.log(xv), (x,), lambda gr: (gr / xv,))


def abs_(x: Var) -> Var:
    xv = x.value
    return x.graph.record(np.abs(xv), (x,), lambda gr: (gr * np.sign(xv),))


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return x.graph.record(out, (x,), lambda gr: (gr * (1.0 - out * out),))


def sigmoid(x: Var) -> Var:
    out = sigmoid_np(x.value)
    return x.graph.record(out, (x,), lambda gr: (gr * out * (1.0 - out),))


def clip(x: Var, lo: float, hi: float) -> Var:
    """Clamp with a zero gradient wherever the clamp is active."""
    xv = x.value
    inside = (xv > lo) & (xv < hi)
    return x.graph.record(np.clip(xv, lo, hi), (x,), lambda gr: (gr * inside,))


def gelu_np(x):
    x = np.asarray(x, dtype=DTYPE)
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def activation_gelu(x: float) -> float:
    """Tanh-approximated GELU on a scalar."""
    if not math.isfinite(x):
        raise ValueError("gelu input must be finite")
    return 0.5 * x * (1.0 + math.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu(x: Var) -> Var:
    xv = x.value
    inner = GELU_C * (xv + GELU_A * xv * xv * xv)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def bw(gr):
        d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv)
        return (gr * d,)

    return x.graph.record(out, (x,), bw)


def sigmoid_np(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Var, axis=-1) -> Var:
    out = softmax_np(x.value, axis)

    def bw(gr):
        return (out * (gr - (gr * out).sum(axis=axis, keepdims=True)),)

    return x.graph.record(out, (x,), bw)


def log_softmax(x: Var, axis=-1) -> Var:
    out = log_softmax_np(x.value, axis)

    def bw(gr):
        return (gr - np.exp(out) * gr.sum(axis=axis, keepdims=True),)

    return x.graph.record(out, (x,), bw)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    g = x.graph
    gain, bias = _as_var(gain, g), _as_var(bias, g)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.value + bias.value
    n = xv.shape[-1]

    def bw(gr):
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = gr * gain.value
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        if gain.requires_grad:
            ggain = _unbroadcast(gr * xhat, gain.value.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(gr, bias.value.shape)
        return gx, ggain, gbias

    return g.record(out, (x, gain, bias), bw)


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.graph.record(x.value.reshape(shape), (x,), lambda gr: (gr.reshape(old),))


def transpose(x: Var, axes) -> Var:
    inv = np.argsort(axes)
    return x.graph.record(np.transpose(x.value, axes), (x,), lambda gr: (np.transpose(gr, inv),))


def getitem(x: Var, idx) -> Var:
    shape = x.value.shape

    def bw(gr):
        full = np.zeros(shape, dtype=gr.dtype)
        np.add.at(full, idx, gr)
        return (full,)

    return x.graph.record(np.asarray(x.value[idx]), (x,), bw)


def take_rows(table: Var, ids: np.ndarray) -> Var:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)

    def bw(gr):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), gr.reshape(-1, table.value.shape[-1]))
        return (full,)

    return table.graph.record(table.value[ids], (table,), bw)


def gather_last(x: Var, idx: np.ndarray) -> Var:
    """out[..., ] = x[..., idx[...]] along the last axis."""
    idx = np.asarray(idx)
    out = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]

    def bw(gr):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, idx[..., None], gr[..., None], axis=-1)
        return (full,)

    return x.graph.record(out, (x,), bw)


def concat(xs: Sequence[Var], axis=-1) -> Var:
    g = _graph_of(*xs)
    xs = [_as_var(x, g) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(gr):
        return tuple(np.split(gr, splits, axis=axis))

    return g.record(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Graph, Var], Var], point, step: float = FD_STEP, fd_dtype=np.longdouble) -> float:
    """Max relative error between backward() and central differences.

    ``f(graph, x)`` must build a scalar from the leaf ``x``.  The difference
    quotients are evaluated in ``fd_dtype`` (extended precision where the
    platform has it) so that their rounding error, about eps*|f|/step, stays
    well below the tolerances used on small gradient coordinates.
    """
    point = np.array(point, dtype=DTYPE)

    def value_at(p):
        g = Graph(fd_dtype)
        return f(g, g.leaf(p)).value.reshape(())[()]

    g = Graph()
    x = g.leaf(point, trainable=True)
    loss = f(g, x)
    if not np.all(np.isfinite(loss.value)):
        raise GradError("function is not finite at the check point")
    analytic = g.backward(loss)[x].reshape(-1)

    worst = 0.0
    hi = point.astype(fd_dtype)
    flat = hi.reshape(-1)
    h = fd_dtype(step)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value_at(hi)
        flat[i] = orig - h
        down = value_at(hi)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise GradError("function is not finite near the check point")
        fd = float((up - down) / (2 * h))
        err = abs(analytic[i] - fd) / max(1e-12, abs(fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# xoshiro256** seeded through splitmix64

_M64 = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _M64


def splitmix64(state: int):
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator; identical streams on every platform."""

    def __init__(self, seed: int):
        sm = seed & _M64
        s = []
        for _ in range(4):
            sm, z = splitmix64(sm)
            s.append(z)
        self.s = s

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _M64, 7) * 9) & _M64
        t = (s[1] << 17) & _M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def open_uniform(self, n: int) -> np.ndarray:
        """n draws strictly inside (0, 1)."""
        return np.array([((self.next_u64() >> 11) + 0.5) * 2.0**-53 for _ in range(n)], dtype=DTYPE)

    def uniform(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)], dtype=DTYPE)

    def integer(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller standard normals."""
        out = np.empty(n, dtype=DTYPE)
        for i in range(0, n, 2):
            u1 = ((self.next_u64() >> 11) + 0.5) * 2.0**-53
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            if i + 1 < n:
                out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        return out

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def choice(self, seq):
        return seq[self.integer(len(seq))]

    def fork(self) -> "Rng":
        """Independent child stream seeded from this one."""
        return Rng(self.next_u64())


def rng_sample_subset(rng: Rng, population_size: int, sample_size: int) -> list[int]:
    """Uniform sample without replacement, returned sorted (Floyd's algorithm)."""
    if sample_size > population_size:
        raise ValueError(f"cannot sample {sample_size} of {population_size}")
    if sample_size < 0:
        raise ValueError("sample_size must be non-negative")
    chosen: set[int] = set()
    for j in range(population_size - sample_size, population_size):
        t = rng.integer(j + 1)
        chosen.add(j if t in chosen else t)
    return sorted(chosen)
