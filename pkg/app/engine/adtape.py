"""
Reverse-mode automatic differentiation over a recorded expression graph.

A tape is recorded once by running a Python function on a `TapeVar`
standing in for the input vector. Nodes hold 1-D float64 arrays, so a
likelihood over N observations records a handful of vector nodes rather
than N scalar ones. Branches (comparisons, maximum/minimum) are frozen at
their recorded outcome; re-record when the active branch would change.

Second derivatives are Hessian-vector products (forward tangents, then a
reverse sweep of adjoints and adjoint tangents), batched over seed vectors
that group structurally orthogonal columns of the detected sparsity
pattern.
"""

import logging
import math
import uuid
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Any, Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from app.errors import (
    PatternMismatchError,
    TapeEvaluationError,
    UnsupportedOperationError,
)
from app.utils.reduction import chunked_sum

log = logging.getLogger(__name__)


class Op(str, Enum):
    INPUT = "input"
    CONST = "const"
    GATHER = "gather"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    EXP = "exp"
    LOG = "log"
    SOFTPLUS = "softplus"
    POW = "pow"
    MATVEC = "matvec"
    SUM = "sum"
    SELECT = "select"


_BINARY = (Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.SELECT)


@dataclass(frozen=True, slots=True)
class Node:
    op: Op
    parents: tuple[int, ...]
    size: int
    data: Any = None


@dataclass(frozen=True, slots=True)
class _Gather:
    idx: np.ndarray
    scatter: sp.csr_matrix  # parent_size x len(idx), adjoint = scatter @ z


@dataclass(frozen=True, slots=True)
class _MatVec:
    matrix: np.ndarray
    matrix_t: np.ndarray


# ── Node arithmetic ──────────────────────────────────────────────────────────


def _eval_node(op: Op, pv: list[np.ndarray], data: Any) -> np.ndarray:
    if op is Op.CONST:
        return data
    if op is Op.GATHER:
        return pv[0][data.idx]
    if op is Op.ADD:
        return pv[0] + pv[1]
    if op is Op.SUB:
        return pv[0] - pv[1]
    if op is Op.MUL:
        return pv[0] * pv[1]
    if op is Op.DIV:
        return pv[0] / pv[1]
    if op is Op.NEG:
        return -pv[0]
    if op is Op.EXP:
        return np.exp(pv[0])
    if op is Op.LOG:
        return np.log(pv[0])
    if op is Op.SOFTPLUS:
        return np.logaddexp(0.0, pv[0])
    if op is Op.POW:
        return pv[0] ** data
    if op is Op.MATVEC:
        return data.matrix @ pv[0]
    if op is Op.SUM:
        return np.array([chunked_sum(pv[0])])
    if op is Op.SELECT:
        return np.where(data, pv[0], pv[1])
    raise UnsupportedOperationError(op.value)


def _fit_rows(arr: np.ndarray, size: int) -> np.ndarray:
    """Reduce a broadcast contribution back to a parent of `size` rows."""
    if arr.shape[0] == size:
        return arr
    return arr.sum(axis=0, keepdims=True)


def _bcast(v: np.ndarray, size: int) -> np.ndarray:
    return np.broadcast_to(v, (size,)) if v.size != size else v


# ── Recording ────────────────────────────────────────────────────────────────


class _Recorder:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def push(
        self,
        op: Op,
        parents: tuple[int, ...],
        data: Any = None,
        value: np.ndarray | None = None,
    ) -> "TapeVar":
        if value is None:
            with np.errstate(all="ignore"):
                value = _eval_node(
                    op, [self.values[p] for p in parents], data
                )
        k = len(self.nodes)
        if op is not Op.CONST and not np.isfinite(value).all():
            raise TapeEvaluationError(k, op.value)
        self.nodes.append(Node(op, parents, int(value.size), data))
        self.values.append(value)
        return TapeVar(self, k, value)


_UFUNCS = {
    "add": "__add__",
    "subtract": "__sub__",
    "multiply": "__mul__",
    "true_divide": "__truediv__",
    "divide": "__truediv__",
    "power": "__pow__",
    "negative": "__neg__",
    "exp": "exp",
    "log": "log",
    "maximum": "maximum",
    "minimum": "minimum",
}


class TapeVar:
    """Vector-valued variable recorded on a tape."""

    __slots__ = ("_rec", "index", "value")
    __array_priority__ = 1000

    def __init__(self, rec: _Recorder, index: int, value: np.ndarray):
        self._rec = rec
        self.index = index
        self.value = value

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"TapeVar(node={self.index}, size={self.size})"

    def _lift(self, other: Any) -> "TapeVar":
        if isinstance(other, TapeVar):
            if other._rec is not self._rec:
                raise UnsupportedOperationError(
                    "mixing variables from different tapes"
                )
            return other
        arr = np.atleast_1d(np.asarray(other, dtype=np.float64))
        if arr.ndim != 1:
            raise UnsupportedOperationError(
                f"constant of shape {arr.shape} (vectors only)"
            )
        return self._rec.push(Op.CONST, (), arr.copy(), arr.copy())

    def _binary(self, op: Op, a: "TapeVar", b: "TapeVar", data=None):
        if a.size != b.size and 1 not in (a.size, b.size):
            raise UnsupportedOperationError(
                f"{op.value} of sizes {a.size} and {b.size}"
            )
        return self._rec.push(op, (a.index, b.index), data)

    # arithmetic
    def __add__(self, other):
        return self._binary(Op.ADD, self, self._lift(other))

    def __radd__(self, other):
        return self._binary(Op.ADD, self._lift(other), self)

    def __sub__(self, other):
        return self._binary(Op.SUB, self, self._lift(other))

    def __rsub__(self, other):
        return self._binary(Op.SUB, self._lift(other), self)

    def __mul__(self, other):
        return self._binary(Op.MUL, self, self._lift(other))

    def __rmul__(self, other):
        return self._binary(Op.MUL, self._lift(other), self)

    def __truediv__(self, other):
        return self._binary(Op.DIV, self, self._lift(other))

    def __rtruediv__(self, other):
        return self._binary(Op.DIV, self._lift(other), self)

    def __neg__(self):
        return self._rec.push(Op.NEG, (self.index,))

    def __pos__(self):
        return self

    def __pow__(self, exponent):
        if isinstance(exponent, TapeVar):
            raise UnsupportedOperationError("power with a variable exponent")
        c = float(exponent)
        if c == 1.0:
            return self
        return self._rec.push(Op.POW, (self.index,), c)

    def __rpow__(self, base):
        raise UnsupportedOperationError("power with a variable exponent")

    def __matmul__(self, other):
        raise UnsupportedOperationError("variable @ matrix")

    def __rmatmul__(self, matrix):
        return self.matvec(matrix)

    def matvec(self, matrix) -> "TapeVar":
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != self.size:
            raise UnsupportedOperationError(
                f"matvec of shape {m.shape} with size {self.size}"
            )
        data = _MatVec(np.ascontiguousarray(m), np.ascontiguousarray(m.T))
        return self._rec.push(Op.MATVEC, (self.index,), data)

    def exp(self):
        return self._rec.push(Op.EXP, (self.index,))

    def log(self):
        return self._rec.push(Op.LOG, (self.index,))

    def softplus(self):
        """log(1 + exp(x)), finite for any x."""
        return self._rec.push(Op.SOFTPLUS, (self.index,))

    def sum(self, axis=None, dtype=None, out=None, **kwargs):
        if axis not in (None, 0) or out is not None:
            raise UnsupportedOperationError("sum with axis/out")
        if self.size == 1:
            return self
        return self._rec.push(Op.SUM, (self.index,))

    def __getitem__(self, key):
        idx = np.arange(self.size)[key]
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        scatter = sp.csr_matrix(
            (np.ones(idx.size), (idx, np.arange(idx.size))),
            shape=(self.size, idx.size),
        )
        return self._rec.push(
            Op.GATHER, (self.index,), _Gather(idx, scatter)
        )

    # branches frozen at their recorded outcome
    def _select(self, mask: np.ndarray, a, b):
        a, b = self._lift(a), self._lift(b)
        size = max(a.size, b.size)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (size,)).copy()
        return self._binary(Op.SELECT, a, b, mask)

    def maximum(self, other):
        other = self._lift(other)
        return self._select(self.value >= other.value, self, other)

    def minimum(self, other):
        other = self._lift(other)
        return self._select(self.value <= other.value, self, other)

    def where(self, condition, other):
        """Elementwise `self if condition else other`, condition frozen."""
        return self._select(np.asarray(condition, dtype=bool), self, other)

    def __lt__(self, other):
        return self.value < _raw(other)

    def __le__(self, other):
        return self.value <= _raw(other)

    def __gt__(self, other):
        return self.value > _raw(other)

    def __ge__(self, other):
        return self.value >= _raw(other)

    # conversions that would silently detach values from the tape
    def __float__(self):
        raise UnsupportedOperationError("float() conversion")

    def __bool__(self):
        raise UnsupportedOperationError("truth value of a variable")

    def __array__(self, *args, **kwargs):
        raise UnsupportedOperationError("conversion to ndarray")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        name = ufunc.__name__
        if method != "__call__" or kwargs or name not in _UFUNCS:
            label = name if method == "__call__" else f"{name}.{method}"
            raise UnsupportedOperationError(label)
        first = inputs[0]
        rest = inputs[1:]
        attr = _UFUNCS[name]
        if isinstance(first, TapeVar):
            return getattr(first, attr)(*rest)
        # constant on the left: lift it, then apply
        return getattr(self._lift(first), attr)(*rest)

    def __array_function__(self, func, types, args, kwargs):
        if func is np.sum:
            return args[0].sum(**kwargs)
        if func is np.dot and isinstance(args[1], TapeVar):
            return args[1].matvec(args[0])
        raise UnsupportedOperationError(func.__name__)


def _raw(v: Any) -> np.ndarray:
    return v.value if isinstance(v, TapeVar) else np.asarray(v)


# ── Tape ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Tape:
    nodes: tuple[Node, ...]
    input_count: int
    output_index: int
    recorded_value: float
    token: str

    def __post_init__(self) -> None:
        for k, node in enumerate(self.nodes):
            if any(p >= k for p in node.parents):
                raise ValueError(f"tape node {k} is not topologically sorted")
        if self.nodes[0].op is not Op.INPUT:
            raise ValueError("tape node 0 must be the input vector")

    @cached_property
    def pattern(self) -> "SparsityPattern":
        return detect_sparsity(self)


def record(
    f: Callable[[TapeVar], Any], x0: np.ndarray
) -> Tape:
    """Record the scalar function f at x0."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    rec = _Recorder()
    inp = rec.push(Op.INPUT, (), None, x0)
    out = f(inp)
    if not isinstance(out, TapeVar):
        out = inp._lift(out)
    if out.size != 1:
        raise UnsupportedOperationError(
            f"non-scalar output of size {out.size}"
        )
    nodes = _prune(rec.nodes, out.index)
    tape = Tape(
        nodes=tuple(nodes),
        input_count=x0.size,
        output_index=len(nodes) - 1,
        recorded_value=float(out.value[0]),
        token=uuid.uuid4().hex,
    )
    log.debug(
        "recorded tape: %d nodes (%d before pruning), %d inputs",
        len(nodes),
        len(rec.nodes),
        x0.size,
    )
    return tape


def _prune(nodes: list[Node], output: int) -> list[Node]:
    """Keep node 0 and the ancestors of the output, renumbered."""
    live = np.zeros(len(nodes), dtype=bool)
    live[0] = live[output] = True
    for k in range(output, -1, -1):
        if live[k]:
            for p in nodes[k].parents:
                live[p] = True
    remap = np.cumsum(live) - 1
    kept = []
    for k in np.flatnonzero(live[: output + 1]):
        node = nodes[k]
        parents = tuple(int(remap[p]) for p in node.parents)
        kept.append(Node(node.op, parents, node.size, node.data))
    return kept


# ── Forward / reverse sweeps ─────────────────────────────────────────────────


def _check_input(tape: Tape, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != tape.input_count:
        raise PatternMismatchError(
            f"input of length {x.size} for a tape with "
            f"{tape.input_count} inputs"
        )
    return x


def _forward(tape: Tape, x: np.ndarray) -> list[np.ndarray]:
    vals: list[np.ndarray] = [x] * len(tape.nodes)
    with np.errstate(all="ignore"):
        for k, node in enumerate(tape.nodes):
            if node.op is Op.INPUT:
                continue
            v = _eval_node(node.op, [vals[p] for p in node.parents], node.data)
            if node.op is not Op.CONST and not np.isfinite(v).all():
                raise TapeEvaluationError(k, node.op.value)
            vals[k] = v
    return vals


def evaluate(tape: Tape, x: np.ndarray) -> float:
    x = _check_input(tape, x)
    return float(_forward(tape, x)[tape.output_index][0])


def value_and_gradient(tape: Tape, x: np.ndarray) -> tuple[float, np.ndarray]:
    """One forward and one reverse sweep."""
    x = _check_input(tape, x)
    vals = _forward(tape, x)
    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[tape.output_index] = np.ones(1)

    def acc(p: int, g: np.ndarray) -> None:
        g = _fit_rows(g, tape.nodes[p].size)
        adj[p] = g if adj[p] is None else adj[p] + g

    for k in range(len(tape.nodes) - 1, 0, -1):
        z = adj[k]
        if z is None:
            continue
        node = tape.nodes[k]
        op, ps = node.op, node.parents
        if op is Op.CONST:
            continue
        if op is Op.GATHER:
            acc(ps[0], node.data.scatter @ z)
        elif op is Op.ADD:
            acc(ps[0], z)
            acc(ps[1], z)
        elif op is Op.SUB:
            acc(ps[0], z)
            acc(ps[1], -z)
        elif op is Op.MUL:
            a, b = vals[ps[0]], vals[ps[1]]
            acc(ps[0], _bcast(b * z, z.size))
            acc(ps[1], _bcast(a * z, z.size))
        elif op is Op.DIV:
            a, b = vals[ps[0]], vals[ps[1]]
            acc(ps[0], _bcast(z / b, z.size))
            acc(ps[1], _bcast(-a * z / (b * b), z.size))
        elif op is Op.NEG:
            acc(ps[0], -z)
        elif op is Op.EXP:
            acc(ps[0], vals[k] * z)
        elif op is Op.LOG:
            acc(ps[0], z / vals[ps[0]])
        elif op is Op.SOFTPLUS:
            acc(ps[0], expit(vals[ps[0]]) * z)
        elif op is Op.POW:
            a, c = vals[ps[0]], node.data
            acc(ps[0], c * a ** (c - 1.0) * z)
        elif op is Op.MATVEC:
            acc(ps[0], node.data.matrix_t @ z)
        elif op is Op.SUM:
            acc(ps[0], np.full(tape.nodes[ps[0]].size, z[0]))
        elif op is Op.SELECT:
            acc(ps[0], np.where(node.data, z, 0.0))
            acc(ps[1], np.where(node.data, 0.0, z))
    g = adj[0]
    grad = np.zeros(tape.input_count) if g is None else np.array(g)
    value = float(vals[tape.output_index][0])
    return value, grad


def gradient(tape: Tape, x: np.ndarray) -> np.ndarray:
    return value_and_gradient(tape, x)[1]


def _hvp_batch(tape: Tape, x: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """H(x) @ seeds for an (n, k) block of seed vectors."""
    vals = _forward(tape, x)
    n_nodes = len(tape.nodes)
    k_cols = seeds.shape[1]
    tan: list[np.ndarray | None] = [None] * n_nodes
    tan[0] = seeds

    with np.errstate(all="ignore"):
        for k in range(1, n_nodes):
            node = tape.nodes[k]
            op, ps = node.op, node.parents
            if op is Op.CONST:
                continue
            ts = [tan[p] for p in ps]
            if all(t is None for t in ts):
                continue
            pv = [vals[p] for p in ps]
            if op is Op.GATHER:
                tan[k] = ts[0][node.data.idx]
            elif op in (Op.ADD, Op.SUB):
                sign = 1.0 if op is Op.ADD else -1.0
                tan[k] = _tsum(ts[0], None if ts[1] is None else sign * ts[1])
            elif op is Op.MUL:
                tan[k] = _tsum(
                    _tscale(ts[0], pv[1]), _tscale(ts[1], pv[0])
                )
            elif op is Op.DIV:
                a, b = pv
                tan[k] = _tsum(
                    _tscale(ts[0], 1.0 / b), _tscale(ts[1], -a / (b * b))
                )
            elif op is Op.NEG:
                tan[k] = -ts[0]
            elif op is Op.EXP:
                tan[k] = _tscale(ts[0], vals[k])
            elif op is Op.LOG:
                tan[k] = _tscale(ts[0], 1.0 / pv[0])
            elif op is Op.SOFTPLUS:
                tan[k] = _tscale(ts[0], expit(pv[0]))
            elif op is Op.POW:
                c = node.data
                tan[k] = _tscale(ts[0], c * pv[0] ** (c - 1.0))
            elif op is Op.MATVEC:
                tan[k] = node.data.matrix @ ts[0]
            elif op is Op.SUM:
                tan[k] = ts[0].sum(axis=0, keepdims=True)
            elif op is Op.SELECT:
                mask = node.data[:, None]
                t0 = 0.0 if ts[0] is None else ts[0]
                t1 = 0.0 if ts[1] is None else ts[1]
                tan[k] = np.where(mask, t0, t1) * np.ones((1, k_cols))
            t = tan[k]
            if t is not None and t.shape[0] != node.size:
                tan[k] = np.broadcast_to(t, (node.size, k_cols))

        adj: list[np.ndarray | None] = [None] * n_nodes
        adt: list[np.ndarray | None] = [None] * n_nodes
        adj[tape.output_index] = np.ones(1)
        adt[tape.output_index] = np.zeros((1, k_cols))

        def acc(p: int, g: np.ndarray, gt: np.ndarray | None) -> None:
            size = tape.nodes[p].size
            g = _fit_rows(g, size)
            adj[p] = g if adj[p] is None else adj[p] + g
            if gt is not None:
                gt = _fit_rows(gt, size)
                if gt.shape[0] != size:
                    gt = np.broadcast_to(gt, (size, k_cols))
                adt[p] = gt if adt[p] is None else adt[p] + gt

        for k in range(n_nodes - 1, 0, -1):
            z = adj[k]
            if z is None:
                continue
            zt = adt[k]
            node = tape.nodes[k]
            op, ps = node.op, node.parents
            if op is Op.CONST:
                continue
            if op is Op.GATHER:
                acc(ps[0], node.data.scatter @ z, node.data.scatter @ zt)
            elif op is Op.ADD:
                acc(ps[0], z, zt)
                acc(ps[1], z, zt)
            elif op is Op.SUB:
                acc(ps[0], z, zt)
                acc(ps[1], -z, -zt)
            elif op is Op.NEG:
                acc(ps[0], -z, -zt)
            elif op is Op.MUL:
                a, b = vals[ps[0]], vals[ps[1]]
                ta, tb = tan[ps[0]], tan[ps[1]]
                n = z.size
                acc(
                    ps[0],
                    _bcast(b * z, n),
                    _tsum(_tscale(zt, b), _tscale(tb, z), rows=n),
                )
                acc(
                    ps[1],
                    _bcast(a * z, n),
                    _tsum(_tscale(zt, a), _tscale(ta, z), rows=n),
                )
            elif op is Op.DIV:
                a, b = vals[ps[0]], vals[ps[1]]
                ta, tb = tan[ps[0]], tan[ps[1]]
                n = z.size
                b2 = b * b
                acc(
                    ps[0],
                    _bcast(z / b, n),
                    _tsum(
                        _tscale(zt, 1.0 / b),
                        _tscale(tb, -z / b2),
                        rows=n,
                    ),
                )
                acc(
                    ps[1],
                    _bcast(-a * z / b2, n),
                    _tsum(
                        _tsum(_tscale(zt, -a / b2), _tscale(ta, -z / b2)),
                        _tscale(tb, 2.0 * a * z / (b2 * b)),
                        rows=n,
                    ),
                )
            elif op is Op.EXP:
                e = vals[k]
                acc(
                    ps[0],
                    e * z,
                    _tsum(_tscale(zt, e), _tscale(tan[ps[0]], e * z)),
                )
            elif op is Op.LOG:
                a = vals[ps[0]]
                acc(
                    ps[0],
                    z / a,
                    _tsum(
                        _tscale(zt, 1.0 / a),
                        _tscale(tan[ps[0]], -z / (a * a)),
                    ),
                )
            elif op is Op.SOFTPLUS:
                s = expit(vals[ps[0]])
                acc(
                    ps[0],
                    s * z,
                    _tsum(
                        _tscale(zt, s),
                        _tscale(tan[ps[0]], s * (1.0 - s) * z),
                    ),
                )
            elif op is Op.POW:
                a, c = vals[ps[0]], node.data
                d1 = c * a ** (c - 1.0)
                d2 = c * (c - 1.0) * a ** (c - 2.0)
                acc(
                    ps[0],
                    d1 * z,
                    _tsum(_tscale(zt, d1), _tscale(tan[ps[0]], d2 * z)),
                )
            elif op is Op.MATVEC:
                mt = node.data.matrix_t
                acc(ps[0], mt @ z, mt @ zt)
            elif op is Op.SUM:
                size = tape.nodes[ps[0]].size
                acc(
                    ps[0],
                    np.full(size, z[0]),
                    np.broadcast_to(zt, (size, k_cols)),
                )
            elif op is Op.SELECT:
                mask = node.data
                acc(
                    ps[0],
                    np.where(mask, z, 0.0),
                    np.where(mask[:, None], zt, 0.0),
                )
                acc(
                    ps[1],
                    np.where(mask, 0.0, z),
                    np.where(mask[:, None], 0.0, zt),
                )

    out = adt[0]
    if out is None:
        return np.zeros((tape.input_count, k_cols))
    return np.asarray(out)


def _tscale(t: np.ndarray | None, v: np.ndarray) -> np.ndarray | None:
    if t is None:
        return None
    return t * np.reshape(v, (-1, 1))


def _tsum(
    a: np.ndarray | None, b: np.ndarray | None, rows: int | None = None
) -> np.ndarray | None:
    if a is None:
        out = b
    elif b is None:
        out = a
    else:
        out = a + b
    if out is not None and rows is not None and out.shape[0] != rows:
        out = np.broadcast_to(out, (rows, out.shape[1]))
    return out


# ── Sparsity ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class HessianPlan:
    """Seeds and read-out positions for a colored Hessian evaluation."""

    n_seeds: int
    seed_rows: np.ndarray
    seed_cols: np.ndarray
    read_rows: np.ndarray
    read_cols: np.ndarray
    out_rows: np.ndarray
    out_cols: np.ndarray
    n_dense: int
    n_colors: int


@dataclass(frozen=True)
class SparsityPattern:
    """Upper-triangular (i <= j) Hessian pattern over `index` inputs.

    rows/cols are local positions into `index`; `index` holds the global
    input indices the pattern covers, in increasing order.
    """

    n_inputs: int
    index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    token: str

    @property
    def size(self) -> int:
        return int(self.index.size)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def pairs(self) -> set[tuple[int, int]]:
        """Global (i, j) pairs with i <= j."""
        gi, gj = self.index[self.rows], self.index[self.cols]
        return set(zip(gi.tolist(), gj.tolist()))

    def to_matrix(self) -> sp.csr_matrix:
        """Symmetric boolean matrix in local coordinates."""
        m = self.size
        upper = sp.coo_matrix(
            (np.ones(self.nnz), (self.rows, self.cols)), shape=(m, m)
        ).tocsr()
        full = upper + sp.triu(upper, k=1).T
        full.data[:] = 1.0
        return full.tocsr()

    def union(self, other: "SparsityPattern") -> "SparsityPattern":
        if other.n_inputs != self.n_inputs:
            raise PatternMismatchError("patterns over different inputs")
        pairs = sorted(self.pairs() | other.pairs())
        index = np.arange(self.n_inputs)
        rows = np.array([i for i, _ in pairs], dtype=np.int64)
        cols = np.array([j for _, j in pairs], dtype=np.int64)
        full = SparsityPattern(self.n_inputs, index, rows, cols, self.token)
        keep = np.union1d(self.index, other.index)
        return full.restrict(keep)

    def restrict(self, index: np.ndarray) -> "SparsityPattern":
        """Sub-pattern over a subset of global inputs."""
        index = np.unique(np.asarray(index, dtype=np.int64))
        local = np.full(self.n_inputs, -1, dtype=np.int64)
        local[index] = np.arange(index.size)
        gi, gj = self.index[self.rows], self.index[self.cols]
        li, lj = local[gi], local[gj]
        keep = (li >= 0) & (lj >= 0)
        lo, hi = np.minimum(li[keep], lj[keep]), np.maximum(li[keep], lj[keep])
        return SparsityPattern(self.n_inputs, index, lo, hi, self.token)

    def block_is_diagonal(self, stop: int) -> bool:
        """True if the leading `stop` x `stop` local block is diagonal."""
        off = (self.rows != self.cols) & (self.cols < stop)
        return not bool(off.any())

    @cached_property
    def plan(self) -> HessianPlan:
        return _color(self)


def detect_sparsity(tape: Tape) -> SparsityPattern:
    """Conservative Hessian pattern by dependency propagation.

    Each node carries a boolean (rows x inputs) dependency matrix; a
    nonlinear node contributes the outer products of its operands'
    dependencies, linear nodes only propagate them.
    """
    n = tape.input_count
    deps: list[sp.csr_matrix | None] = [None] * len(tape.nodes)
    deps[0] = sp.identity(n, format="csr")
    terms: list[sp.spmatrix] = []

    def widen(d: sp.csr_matrix, rows: int) -> sp.csr_matrix:
        if d.shape[0] == rows:
            return d
        return sp.csr_matrix(np.ones((rows, 1))) @ d

    for k, node in enumerate(tape.nodes):
        op, ps = node.op, node.parents
        if op in (Op.INPUT, Op.CONST):
            continue
        pd = [deps[p] for p in ps]
        if all(d is None for d in pd):
            continue
        if op is Op.GATHER:
            deps[k] = pd[0][node.data.idx]
        elif op in _BINARY:
            size = node.size
            da = None if pd[0] is None else widen(pd[0], size)
            db = None if pd[1] is None else widen(pd[1], size)
            deps[k] = _binarize(
                da if db is None else db if da is None else da + db
            )
            if op is Op.MUL and da is not None and db is not None:
                terms.append(da.T @ db)
            elif op is Op.DIV and db is not None:
                terms.append(db.T @ db)
                if da is not None:
                    terms.append(da.T @ db)
        elif op is Op.NEG:
            deps[k] = pd[0]
        elif op in (Op.EXP, Op.LOG, Op.SOFTPLUS):
            deps[k] = pd[0]
            terms.append(pd[0].T @ pd[0])
        elif op is Op.POW:
            deps[k] = pd[0]
            if node.data not in (0.0, 1.0):
                terms.append(pd[0].T @ pd[0])
        elif op is Op.MATVEC:
            nz = sp.csr_matrix((node.data.matrix != 0).astype(np.float64))
            deps[k] = _binarize(nz @ pd[0])
        elif op is Op.SUM:
            deps[k] = _binarize(sp.csr_matrix(pd[0].sum(axis=0)))

    total = sp.csr_matrix((n, n))
    for t in terms:
        total = total + t
    total = _binarize(total + total.T)
    upper = sp.triu(total).tocoo()
    order = np.lexsort((upper.col, upper.row))
    return SparsityPattern(
        n_inputs=n,
        index=np.arange(n),
        rows=upper.row[order].astype(np.int64),
        cols=upper.col[order].astype(np.int64),
        token=tape.token,
    )


def _binarize(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.eliminate_zeros()
    m.data[:] = 1.0
    return m


def _color(pattern: SparsityPattern) -> HessianPlan:
    """Greedy grouping of structurally orthogonal columns.

    Columns with many nonzeros are seeded individually ("dense"); the
    remaining columns are grouped so that no two columns of a group share
    a nonzero in a non-dense row. Entries in dense rows are read back from
    the dense columns by symmetry.
    """
    m = pattern.size
    full = pattern.to_matrix() + sp.identity(m, format="csr")
    full = _binarize(full)
    degree = np.diff(full.indptr)
    threshold = max(24, int(2 * math.sqrt(m)))
    dense = degree > threshold
    dense_cols = np.flatnonzero(dense)
    sparse_cols = np.flatnonzero(~dense)

    color = np.full(m, -1, dtype=np.int64)
    n_colors = 0
    if sparse_cols.size:
        sub = full[~dense][:, sparse_cols]
        conflict = (sub.T @ sub).tocsr()
        order = np.argsort(-np.diff(conflict.indptr), kind="stable")
        local_color = np.full(sparse_cols.size, -1, dtype=np.int64)
        for j in order:
            lo, hi = conflict.indptr[j], conflict.indptr[j + 1]
            nbrs = conflict.indices[lo:hi]
            used = set(local_color[nbrs].tolist())
            c = 0
            while c in used:
                c += 1
            local_color[j] = c
        color[sparse_cols] = local_color
        n_colors = int(local_color.max()) + 1

    n_dense = int(dense_cols.size)
    slot = np.full(m, -1, dtype=np.int64)
    slot[dense_cols] = np.arange(n_dense)
    seed_rows = np.concatenate([dense_cols, sparse_cols])
    seed_cols = np.concatenate(
        [slot[dense_cols], n_dense + color[sparse_cols]]
    )

    i, j = pattern.rows, pattern.cols
    read_rows = np.where(dense[j], i, np.where(dense[i], j, i))
    read_cols = np.where(
        dense[j], slot[j], np.where(dense[i], slot[i], n_dense + color[j])
    )
    off = i != j
    out_rows = np.concatenate([i, j[off]])
    out_cols = np.concatenate([j, i[off]])
    read_rows = np.concatenate([read_rows, read_rows[off]])
    read_cols = np.concatenate([read_cols, read_cols[off]])
    log.debug(
        "hessian plan: %d inputs, %d dense, %d colors", m, n_dense, n_colors
    )
    return HessianPlan(
        n_seeds=n_dense + n_colors,
        seed_rows=seed_rows,
        seed_cols=seed_cols,
        read_rows=read_rows,
        read_cols=read_cols,
        out_rows=out_rows,
        out_cols=out_cols,
        n_dense=n_dense,
        n_colors=n_colors,
    )


def hessian(
    tape: Tape, x: np.ndarray, pattern: SparsityPattern | None = None
) -> sp.csr_matrix:
    """Sparse symmetric Hessian over `pattern.index` (local coordinates).

    Entries outside the pattern are exactly zero; the two triangles are
    filled from the same computed value.
    """
    pattern = tape.pattern if pattern is None else pattern
    if pattern.token != tape.token or pattern.n_inputs != tape.input_count:
        raise PatternMismatchError(
            "sparsity pattern was not built from this tape"
        )
    x = _check_input(tape, x)
    plan = pattern.plan
    m = pattern.size
    if plan.n_seeds == 0:
        return sp.csr_matrix((m, m))
    seeds = np.zeros((tape.input_count, plan.n_seeds))
    seeds[pattern.index[plan.seed_rows], plan.seed_cols] = 1.0
    hv = _hvp_batch(tape, x, seeds)[pattern.index]
    values = hv[plan.read_rows, plan.read_cols]
    return sp.coo_matrix(
        (values, (plan.out_rows, plan.out_cols)), shape=(m, m)
    ).tocsr()
