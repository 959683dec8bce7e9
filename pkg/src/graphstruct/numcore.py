"""Dense/sparse matrix containers and a minimal reverse-mode tape.

The tape records every primitive operation, and the reverse pass itself
emits taped primitives, so gradients of gradients (Hessian-vector
products, mixed partials) come out of the same machinery.  All values
are 2-d float64 arrays; scalars are (1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class NumError(ValueError):
    pass


# ---------------------------------------------------------------------------
# containers


@dataclass
class DenseMatrix:
    """Row-major float64 matrix."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise NumError(f"DenseMatrix must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumError("DenseMatrix entries must be finite")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SparseMatrix:
    """CSR matrix: row_offsets has length rows+1, col_indices within [0, cols)."""

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.row_offsets) != self.rows + 1:
            raise NumError("row_offsets must have length rows+1")
        if np.any(np.diff(self.row_offsets) < 0):
            raise NumError("row_offsets must be nondecreasing")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.cols
        ):
            raise NumError("col_indices out of range")

    @classmethod
    def from_csr(cls, m: sp.csr_matrix) -> "SparseMatrix":
        m = m.tocsr()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "SparseMatrix":
        return cls.from_csr(sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=(self.rows, self.cols)
        )

    def densify(self) -> np.ndarray:
        return self.to_csr().toarray()


def as_array(x) -> np.ndarray:
    """Coerce DenseMatrix / ndarray / scalar to a 2-d float64 array."""
    if isinstance(x, Node):
        raise NumError("expected a plain value, got a tape node")
    if isinstance(x, DenseMatrix):
        return x.values
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    return a


def as_csr(x) -> sp.csr_matrix:
    if isinstance(x, SparseMatrix):
        return x.to_csr()
    if sp.issparse(x):
        return x.tocsr()
    raise NumError(f"expected a sparse matrix, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive operations (inputs precede outputs)."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None


class Node:
    __slots__ = ("tape", "idx", "value", "op", "inputs", "aux")

    def __init__(self, tape, value, op, inputs, aux=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, idx={self.idx})"


def leaf(x, tape=None) -> Node:
    tape = tape or Tape.active()
    if tape is None:
        raise NumError("no active tape")
    return Node(tape, as_array(x), "leaf", ())


def _lift(x, tape=None) -> Node:
    return x if isinstance(x, Node) else leaf(x, tape)


def _taped(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _emit(op, inputs, value, aux=None) -> Node:
    tape = inputs[0].tape if inputs else Tape.active()
    return Node(tape, value, op, tuple(inputs), aux)


def _wrap(value):
    return DenseMatrix(value)


_VJP = {}


def _vjp(name):
    def deco(fn):
        _VJP[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# primitives
#
# Each public op works on DenseMatrix/ndarray (returning DenseMatrix) or on
# tape nodes (returning a node); a node anywhere in the inputs, or an active
# tape, switches on recording.


def _binary(op, a, b, fw):
    if _taped(a, b) or Tape.active() is not None:
        tape = a.tape if isinstance(a, Node) else (b.tape if isinstance(b, Node) else None)
        a, b = _lift(a, tape), _lift(b, tape)
        return _emit(op, (a, b), fw(a.value, b.value))
    return _wrap(fw(as_array(a), as_array(b)))


def add(a, b):
    return _binary("add", a, b, np.add)


def sub(a, b):
    return _binary("sub", a, b, np.subtract)


def mul(a, b):
    return _binary("mul", a, b, np.multiply)


def div(a, b):
    return _binary("div", a, b, np.divide)


def _unary(op, x, fw, aux=None):
    if _taped(x) or Tape.active() is not None:
        x = _lift(x)
        return _emit(op, (x,), fw(x.value), aux)
    return _wrap(fw(as_array(x)))


def neg(x):
    return _unary("neg", x, np.negative)


def exp(x):
    return _unary("exp", x, np.exp)


def log(x):
    v = x.value if isinstance(x, Node) else as_array(x)
    if np.any(v <= 0.0):
        raise NumError("log of non-positive entry")
    return _unary("log", x, np.log)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt)


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0.0))


def clamp01(x):
    return _unary("clamp01", x, lambda v: np.clip(v, 0.0, 1.0))


def scale(x, c: float):
    return _unary("scale", x, lambda v: v * c, aux=float(c))


def transpose(x):
    return _unary("transpose", x, lambda v: np.ascontiguousarray(v.T))


def sumall(x):
    return _unary("sum", x, lambda v: v.sum().reshape(1, 1), aux=None)


def sumrows(x):
    """Sum over columns: (r, c) -> (r, 1)."""
    return _unary("sum", x, lambda v: v.sum(axis=1, keepdims=True), aux=1)


def sumcols(x):
    """Sum over rows: (r, c) -> (1, c)."""
    return _unary("sum", x, lambda v: v.sum(axis=0, keepdims=True), aux=0)


def broadcast_to(x, shape):
    shape = tuple(shape)
    return _unary("broadcast", x, lambda v: np.broadcast_to(v, shape), aux=shape)


def matmul(a, b):
    av = a.value if isinstance(a, Node) else as_array(a)
    bv = b.value if isinstance(b, Node) else as_array(b)
    if av.shape[1] != bv.shape[0]:
        raise NumError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")
    return _binary("matmul", a, b, np.matmul)


def spmm(a, b):
    """Sparse (CSR, constant) times dense.  Gradient flows into b only."""
    a = as_csr(a)
    bv = b.value if isinstance(b, Node) else as_array(b)
    if a.shape[1] != bv.shape[0]:
        raise NumError(f"spmm dimension mismatch: {a.shape} x {bv.shape}")
    if _taped(b) or Tape.active() is not None:
        b = _lift(b)
        return _emit("spmm", (b,), a @ b.value, aux=a)
    return _wrap(a @ bv)


ELEMENTWISE_KINDS = ("relu", "mul", "add", "clamp01", "log", "exp")


def elementwise(kind, *inputs):
    """Pointwise op dispatch over the supported kinds."""
    table = {"relu": relu, "mul": mul, "add": add, "clamp01": clamp01, "log": log, "exp": exp}
    if kind not in table:
        raise NumError(f"unknown elementwise kind {kind!r}")
    return table[kind](*inputs)


def row_softmax(x):
    """Row-stochastic softmax with max-subtraction for stability."""
    v = x.value if isinstance(x, Node) else as_array(x)
    shift = np.max(v, axis=1, keepdims=True)
    if _taped(x) or Tape.active() is not None:
        x = _lift(x)
        z = sub(x, leaf(shift, x.tape))
        e = exp(z)
        return div(e, sumrows(e))
    e = np.exp(v - shift)
    return _wrap(e / e.sum(axis=1, keepdims=True))


def row_log_softmax(x):
    v = x.value if isinstance(x, Node) else as_array(x)
    shift = np.max(v, axis=1, keepdims=True)
    if _taped(x) or Tape.active() is not None:
        x = _lift(x)
        z = sub(x, leaf(shift, x.tape))
        return sub(z, log(sumrows(exp(z))))
    z = v - shift
    return _wrap(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))


# ---------------------------------------------------------------------------
# reverse pass


def _unbroadcast(g: Node, shape) -> Node:
    """Reduce g back to `shape` (both 2-d) after numpy-style broadcasting."""
    if g.value.shape == shape:
        return g
    if shape[0] == 1 and g.value.shape[0] > 1:
        g = sumcols(g)
    if shape[1] == 1 and g.value.shape[1] > 1:
        g = sumrows(g)
    return g


@_vjp("add")
def _(n, g):
    return (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(g, n.inputs[1].shape))


@_vjp("sub")
def _(n, g):
    return (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(neg(g), n.inputs[1].shape))


@_vjp("mul")
def _(n, g):
    a, b = n.inputs
    return (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape))


@_vjp("div")
def _(n, g):
    a, b = n.inputs
    ga = _unbroadcast(div(g, b), a.shape)
    gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
    return (ga, gb)


@_vjp("neg")
def _(n, g):
    return (neg(g),)


@_vjp("exp")
def _(n, g):
    return (mul(g, n),)


@_vjp("log")
def _(n, g):
    return (div(g, n.inputs[0]),)


@_vjp("sqrt")
def _(n, g):
    return (div(g, scale(n, 2.0)),)


@_vjp("relu")
def _(n, g):
    # subgradient at 0 is 0
    mask = leaf((n.inputs[0].value > 0.0).astype(np.float64), n.tape)
    return (mul(g, mask),)


@_vjp("clamp01")
def _(n, g):
    v = n.inputs[0].value
    mask = leaf(((v > 0.0) & (v < 1.0)).astype(np.float64), n.tape)
    return (mul(g, mask),)


@_vjp("scale")
def _(n, g):
    return (scale(g, n.aux),)


@_vjp("transpose")
def _(n, g):
    return (transpose(g),)


@_vjp("sum")
def _(n, g):
    return (broadcast_to(g, n.inputs[0].shape),)


@_vjp("broadcast")
def _(n, g):
    return (_unbroadcast(g, n.inputs[0].shape),)


@_vjp("matmul")
def _(n, g):
    a, b = n.inputs
    return (matmul(g, transpose(b)), matmul(transpose(a), g))


@_vjp("spmm")
def _(n, g):
    at = n.aux.T.tocsr()
    return (spmm(at, g),)


def grad(output: Node, wrt, allow_unused: bool = False):
    """Reverse pass from a scalar node.

    Emits taped primitives, so the returned nodes are differentiable
    again.  Returns a list aligned with `wrt` (or a single node).
    """
    single = isinstance(wrt, Node)
    wrts = [wrt] if single else list(wrt)
    if not isinstance(output, Node):
        raise NumError("grad output must be a tape node")
    if output.value.size != 1:
        raise NumError(f"grad output must be scalar, got shape {output.value.shape}")
    for w in wrts:
        if w.tape is not output.tape:
            raise NumError("wrt node not on the output's tape")

    # restrict the reverse pass to ancestors of output
    ancestors = set()
    stack = [output]
    while stack:
        n = stack.pop()
        if n.idx not in ancestors:
            ancestors.add(n.idx)
            stack.extend(n.inputs)

    prefix = output.tape.nodes[: output.idx + 1]
    adjoint: dict[int, Node] = {output.idx: leaf(np.ones((1, 1)), output.tape)}
    for n in reversed(prefix):
        if n.idx not in ancestors or n.idx not in adjoint:
            continue
        if n.op == "leaf":
            continue
        gs = _VJP[n.op](n, adjoint[n.idx])
        for inp, gi in zip(n.inputs, gs):
            if gi is None:
                continue
            prev = adjoint.get(inp.idx)
            adjoint[inp.idx] = gi if prev is None else add(prev, gi)

    out = []
    for w in wrts:
        gw = adjoint.get(w.idx)
        if gw is None:
            if not allow_unused:
                raise NumError("output is not reachable from a wrt node")
            gw = leaf(np.zeros(w.shape), output.tape)
        out.append(gw)
    return out[0] if single else out


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else as_array(x)


# ---------------------------------------------------------------------------
# rng


class Rng:
    """Counter-based deterministic RNG (Philox).

    Identical (seed, stream key, call sequence) gives identical output,
    independent of thread count or platform.
    """

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *ids: int) -> "Rng":
        """Independent substream identified by (seed, *stream, *ids)."""
        return Rng(self.seed, *self.stream, *ids)

    def next_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape, std=1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffled(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
