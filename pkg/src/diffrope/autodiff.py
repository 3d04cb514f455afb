"""Reverse-mode automatic differentiation on a recorded tape.

A :class:`Tape` is an append-only list of nodes.  Each node stores the indices
of its parents and a closure mapping the output adjoint to parent adjoints.
Values are numpy arrays (0-d for scalars), so the unrolled solver records
one node per vectorized operation instead of one per float.

Every op in this module accepts plain arrays as well as :class:`Var`.  When no
argument lives on a tape the op returns an ordinary ``ndarray`` and records
nothing, which is how the solver runs its fast undifferentiated path.

Example::

    tape = Tape()
    a = tape.leaf(2.0)
    b = tape.leaf(5.0)
    grads = backward(a * b)
    grads[a], grads[b]   # (5.0, 2.0)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import quaternion as quat

__all__ = [
    "Tape",
    "Var",
    "DiffVar",
    "Gradients",
    "TapeError",
    "MemoryBudgetError",
    "CheckpointPolicy",
    "checkpoint_policy",
    "leaf",
    "backward",
    "value",
    "is_var",
]


class TapeError(RuntimeError):
    pass


class MemoryBudgetError(ValueError):
    pass


class Tape:
    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: list[int] = []
        self.finalized = False

    def __len__(self) -> int:
        return len(self._parents)

    @property
    def leaves(self) -> list[int]:
        return list(self._leaves)

    def leaf(self, value) -> "Var":
        if self.finalized:
            raise TapeError("tape is finalized; no new leaves can be registered")
        v = self._record(np.array(value, dtype=float), (), None)
        self._leaves.append(v.index)
        return v

    def finalize(self) -> None:
        self.finalized = True

    def _record(self, value: np.ndarray, parents: tuple[int, ...], vjp) -> "Var":
        if self.finalized:
            raise TapeError("cannot record on a finalized tape")
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(np.shape(value))
        return Var(value, self, len(self._parents) - 1)

    def vjp(self, outputs: Sequence["Var"], seeds: Sequence) -> dict[int, np.ndarray]:
        """Accumulate adjoints from several seeded outputs; returns leaf adjoints."""
        if not outputs:
            return {i: np.zeros(self._shapes[i]) for i in self._leaves}
        adj: list = [None] * len(self._parents)
        top = -1
        for out, seed in zip(outputs, seeds):
            if out.tape is not self:
                raise TapeError("output does not belong to this tape")
            s = np.broadcast_to(np.asarray(seed, dtype=float), self._shapes[out.index])
            adj[out.index] = s if adj[out.index] is None else adj[out.index] + s
            top = max(top, out.index)
        for i in range(top, -1, -1):
            g = adj[i]
            if g is None:
                continue
            parents = self._parents[i]
            if not parents:
                continue
            grads = self._vjps[i](g)
            for p, gp in zip(parents, grads):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        out = {}
        for i in self._leaves:
            out[i] = np.zeros(self._shapes[i]) if adj[i] is None else np.array(adj[i], dtype=float)
        return out


class Var:
    """A value recorded on a tape (``DiffVar``)."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000.0

    def __init__(self, value: np.ndarray, tape: Tape, index: int) -> None:
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var({self.value!r}, node={self.index})"

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


DiffVar = Var


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Underlying numeric value of a Var or array."""
    return x.value if isinstance(x, Var) else x


def leaf(v, tape: Tape) -> Var:
    return tape.leaf(v)


def _tape(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _op(fn_value, inputs, vjp_factory):
    """Evaluate an op and record it if any input is a Var.

    ``vjp_factory(out_value, *input_values)`` returns a closure mapping the
    output adjoint to a tuple of input adjoints (``None`` for constants).
    """
    tape = _tape(*inputs)
    vals = [value(x) for x in inputs]
    out = fn_value(*vals)
    if tape is None:
        return out
    idx = []
    pos = []
    for k, x in enumerate(inputs):
        if isinstance(x, Var):
            idx.append(x.index)
            pos.append(k)
    raw = vjp_factory(out, *vals)

    def vjp(g, raw=raw, pos=tuple(pos)):
        gs = raw(g)
        return tuple(gs[k] for k in pos)

    return tape._record(np.asarray(out, dtype=float), tuple(idx), vjp)


# elementwise arithmetic -------------------------------------------------------


def add(a, b):
    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _op(np.add, (a, b), fac)


def sub(a, b):
    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _op(np.subtract, (a, b), fac)


def mul(a, b):
    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))

    return _op(np.multiply, (a, b), fac)


def div(a, b):
    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb))

    return _op(np.divide, (a, b), fac)


def neg(a):
    return _op(np.negative, (a,), lambda out, av: lambda g: (-g,))


def power(a, p: float):
    p = float(p)

    def fac(out, av):
        return lambda g: (g * p * av ** (p - 1.0),)

    return _op(lambda av: av**p, (a,), fac)


def sqrt(a):
    return _op(np.sqrt, (a,), lambda out, av: lambda g: (0.5 * g / out,))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""

    def fac(out, av):
        mask = (av > lo) & (av < hi)
        return lambda g: (g * mask,)

    return _op(lambda av: np.clip(av, lo, hi), (a,), fac)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)

    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb))

    return _op(lambda av, bv: np.where(cond, av, bv), (a, b), fac)


# reductions and shape ---------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    def fac(out, av):
        shape = np.shape(av)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return vjp

    return _op(lambda av: np.sum(av, axis=axis, keepdims=keepdims), (a,), fac)


def getitem(a, idx):
    fancy = isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    ) or isinstance(idx, list)

    def fac(out, av):
        shape = np.shape(av)

        def vjp(g):
            z = np.zeros(shape)
            if fancy:
                np.add.at(z, idx, g)
            else:
                z[idx] += g
            return (z,)

        return vjp

    return _op(lambda av: np.asarray(av)[idx], (a,), fac)


def reshape(a, shape):
    def fac(out, av):
        s = np.shape(av)
        return lambda g: (np.reshape(g, s),)

    return _op(lambda av: np.reshape(av, shape), (a,), fac)


def stack(xs: Sequence, axis: int = 0):
    xs = list(xs)

    def fac(out, *vals):
        return lambda g: tuple(np.take(g, k, axis=axis) for k in range(len(vals)))

    return _op(lambda *v: np.stack(v, axis=axis), xs, fac)


def concatenate(xs: Sequence, axis: int = 0):
    xs = list(xs)

    def fac(out, *vals):
        sizes = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]
        return lambda g: tuple(np.split(g, sizes, axis=axis))

    return _op(lambda *v: np.concatenate(v, axis=axis), xs, fac)


def pad_rows(a, before: int, after: int):
    """Zero-pad along axis 0."""

    def fac(out, av):
        n = np.shape(av)[0]
        return lambda g: (g[before : before + n],)

    def fwd(av):
        av = np.asarray(av)
        out = np.zeros((before + av.shape[0] + after,) + av.shape[1:])
        out[before : before + av.shape[0]] = av
        return out

    return _op(fwd, (a,), fac)


# vector algebra ---------------------------------------------------------------


def dot(a, b):
    """Inner product over the last axis."""

    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)

        def vjp(g):
            g = np.expand_dims(g, -1)
            return (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))

        return vjp

    return _op(lambda av, bv: np.sum(av * bv, axis=-1), (a, b), fac)


def cross(a, b):
    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (_unbroadcast(np.cross(bv, g), sa), _unbroadcast(np.cross(g, av), sb))

    return _op(lambda av, bv: np.cross(av, bv), (a, b), fac)


def norm(a, axis: int = -1, grad_floor: float = 0.0):
    """Euclidean norm over ``axis``.

    The value is exact.  In the backward pass the denominator is
    ``max(|a|, grad_floor)``, so a zero vector has zero gradient (a valid
    subgradient) instead of NaN.
    """

    def fac(out, av):
        def vjp(g):
            den = np.maximum(np.expand_dims(out, axis), grad_floor)
            safe = np.where(den > 0.0, den, 1.0)
            return (np.where(den > 0.0, np.expand_dims(g, axis) * av / safe, 0.0),)

        return vjp

    return _op(lambda av: np.sqrt(np.sum(av * av, axis=axis)), (a,), fac)


def matmul(a, b):
    def fac(out, av, bv):
        av2, bv2 = np.asarray(av), np.asarray(bv)

        def vjp(g):
            ga = g @ np.swapaxes(bv2, -1, -2) if bv2.ndim > 1 else np.multiply.outer(g, bv2)
            gb = np.swapaxes(av2, -1, -2) @ g if av2.ndim > 1 else np.multiply.outer(av2, g)
            return (_unbroadcast(ga, av2.shape), _unbroadcast(gb, bv2.shape))

        return vjp

    return _op(np.matmul, (a, b), fac)


def qmul(a, b):
    """Batched Hamilton product; adjoints are ``g ⊗ b*`` and ``a* ⊗ g``."""

    def fac(out, av, bv):
        sa, sb = np.shape(av), np.shape(bv)
        return lambda g: (
            _unbroadcast(quat.quat_multiply(g, quat.quat_conjugate(bv)), sa),
            _unbroadcast(quat.quat_multiply(quat.quat_conjugate(av), g), sb),
        )

    return _op(quat.quat_multiply, (a, b), fac)


_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def qconj(a):
    return a * _CONJ


def qrotate(q, v):
    """Quadratic-form rotation ``q v q*`` of 3-vectors (see :func:`quaternion.rotate`)."""

    def fac(out, qv, vv):
        sq, sv = np.shape(qv), np.shape(vv)
        qv = np.asarray(qv)
        vv = np.asarray(vv)

        def vjp(g):
            # d<g, q v q*>/dq = -2 g q v for pure g, v;  d/dv = R(q)^T g
            gq = -2.0 * quat.quat_multiply(quat.quat_multiply(quat.pure(g), qv), quat.pure(np.broadcast_to(vv, g.shape)))
            gv = quat.rotate(quat.quat_conjugate(qv), g)
            return (_unbroadcast(gq, sq), _unbroadcast(gv, sv))

        return vjp

    return _op(quat.rotate, (q, v), fac)


# linear algebra ----------------------------------------------------------------


def thomas(lower, diag, upper, rhs) -> np.ndarray:
    """Solve a tridiagonal system by Thomas elimination.

    ``lower[i]`` multiplies ``x[i-1]`` in row ``i`` (``lower[0]`` unused) and
    ``upper[i]`` multiplies ``x[i+1]`` (``upper[-1]`` unused).  Raises
    :class:`ZeroDivisionError` on a zero pivot.
    """
    a = [float(v) for v in lower]
    b = [float(v) for v in diag]
    c = [float(v) for v in upper]
    d = [float(v) for v in rhs]
    n = len(d)
    cp = [0.0] * n
    dp = [0.0] * n
    if b[0] == 0.0:
        raise ZeroDivisionError("zero pivot in row 0")
    cp[0] = c[0] / b[0]
    dp[0] = d[0] / b[0]
    for i in range(1, n):
        m = b[i] - a[i] * cp[i - 1]
        if m == 0.0:
            raise ZeroDivisionError(f"zero pivot in row {i}")
        cp[i] = c[i] / m
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m
    x = [0.0] * n
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return np.array(x)


def tridiag_solve(lower, diag, upper, rhs):
    """Differentiable tridiagonal solve.

    The adjoint ``mu`` solves the transposed system; then
    ``d/drhs = mu`` and ``d/dA_ij = -mu_i x_j`` restricted to the three bands.
    """

    def fac(x, lo, di, up, r):
        lo = np.asarray(lo, dtype=float)
        up = np.asarray(up, dtype=float)

        def vjp(g):
            # transpose: row i has lower' = upper[i-1], upper' = lower[i+1]
            lt = np.concatenate([[0.0], up[:-1]])
            ut = np.concatenate([lo[1:], [0.0]])
            mu = thomas(lt, di, ut, g)
            g_di = -mu * x
            g_lo = np.concatenate([[0.0], -mu[1:] * x[:-1]])
            g_up = np.concatenate([-mu[:-1] * x[1:], [0.0]])
            return (g_lo, g_di, g_up, mu)

        return vjp

    return _op(thomas, (lower, diag, upper, rhs), fac)


# gradients ---------------------------------------------------------------------


class Gradients(Mapping):
    """Read-only map from leaf (Var or node index) to ``dL/dleaf``."""

    def __init__(self, by_index: dict[int, np.ndarray]) -> None:
        self._g = by_index

    def _key(self, k) -> int:
        return k.index if isinstance(k, Var) else int(k)

    def __getitem__(self, k) -> np.ndarray:
        return self._g[self._key(k)]

    def __iter__(self):
        return iter(self._g)

    def __len__(self) -> int:
        return len(self._g)

    def __repr__(self) -> str:
        return f"Gradients({self._g!r})"


def backward(loss, seed=None) -> Gradients:
    """Reverse-accumulate ``dloss/dleaf`` for every registered leaf.

    The tape is finalized (no new leaves) but otherwise left unchanged, so
    calling ``backward`` again gives bit-identical results.
    """
    if not isinstance(loss, Var):
        raise TapeError("loss is not recorded on a tape")
    if seed is None:
        if np.ndim(loss.value) != 0:
            raise TapeError("backward without a seed needs a scalar loss")
        seed = 1.0
    loss.tape.finalize()
    return Gradients(loss.tape.vjp([loss], [seed]))


# checkpointing -----------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointPolicy:
    """How much of the unrolled solve is kept on a tape.

    ``every=None`` with no budget means full unrolling.  Otherwise the forward
    pass stores states every ``every`` iterations and the backward pass
    re-records one segment at a time.  ``max_tape_nodes`` bounds the nodes of
    any single recorded segment.
    """

    every: int | None = None
    max_tape_nodes: int | None = None

    @property
    def unrolled(self) -> bool:
        return self.every is None and self.max_tape_nodes is None

    def segment_length(self, nodes_per_iteration: int) -> int:
        if self.max_tape_nodes is not None and nodes_per_iteration > self.max_tape_nodes:
            raise MemoryBudgetError(
                f"memory bound of {self.max_tape_nodes} tape nodes is below one solver "
                f"iteration ({nodes_per_iteration} nodes)"
            )
        n = self.every
        if self.max_tape_nodes is not None:
            fit = self.max_tape_nodes // max(nodes_per_iteration, 1)
            n = fit if n is None else min(n, fit)
        return max(int(n), 1)


def checkpoint_policy(config: Mapping | None = None) -> CheckpointPolicy:
    """Build a policy from ``{"every": int, "max_tape_nodes": int}`` (both optional)."""
    config = dict(config or {})
    unknown = set(config) - {"every", "max_tape_nodes"}
    if unknown:
        raise ValueError(f"unknown checkpoint options: {sorted(unknown)}")
    every = config.get("every")
    budget = config.get("max_tape_nodes")
    if every is not None and int(every) < 1:
        raise ValueError("checkpoint interval must be >= 1 iteration")
    if budget is not None and int(budget) < 1:
        raise MemoryBudgetError("memory bound must allow at least one tape node")
    return CheckpointPolicy(
        every=None if every is None else int(every),
        max_tape_nodes=None if budget is None else int(budget),
    )


def finite_difference(fn: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array; used by tests and checks."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fn(x)
        flat[i] = old - step
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def iter_leaves(xs: Iterable) -> list[Var]:
    return [x for x in xs if isinstance(x, Var)]
