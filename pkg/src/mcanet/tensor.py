"""Dense tensors with reverse-mode automatic differentiation.

The execution model is a tape: every differentiable operation appends one
node to a global graph in execution order, and ``backward`` walks the tape
in reverse, so topological order is the recording order by construction.
4-D activations use NCHW layout. Precision is a process-global mode
(float64 for verification, float32 for training) and is never mixed inside
one graph.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "zeros",
    "full",
    "uniform",
    "add",
    "mul",
    "scale",
    "matmul",
    "softmax_axis",
    "concat_channels",
    "reshape",
    "transpose",
    "sum_all",
    "gelu",
    "backward",
    "grad_check",
    "no_grad",
    "precision",
    "set_default_dtype",
    "default_dtype",
    "clear_graph",
    "graph_size",
    "count_flops",
    "FlopCounter",
]


class _State:
    """Process-global interpreter state for the tape."""

    def __init__(self):
        self.dtype = np.float64
        self.grad_enabled = True
        self.check_finite = False
        self.nodes: list[_Node] = []
        self.flops: FlopCounter | None = None


_S = _State()


def default_dtype():
    return _S.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dtype}; use float32 or float64")
    _S.dtype = dtype.type


@contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode ("float32"/"float64")."""
    table = {"float32": np.float32, "float64": np.float64}
    if mode not in table:
        raise ShapeError(f"unknown precision mode {mode!r}")
    prev = _S.dtype
    _S.dtype = table[mode]
    try:
        yield
    finally:
        _S.dtype = prev


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / counting)."""
    prev = _S.grad_enabled
    _S.grad_enabled = False
    try:
        yield
    finally:
        _S.grad_enabled = prev


@contextmanager
def finite_checks():
    """Raise NumericsError naming the op when a forward emits non-finite values."""
    prev = _S.check_finite
    _S.check_finite = True
    try:
        yield
    finally:
        _S.check_finite = prev


class FlopCounter:
    """Accumulates analytic operation counts during a traced forward pass.

    Convention: one multiply-accumulate counts as one flop for convolutions
    and matrix products (the convention used by the segmentation-toolbox
    counters that published accounting numbers in this area); pointwise and
    normalization work is counted per element.
    """

    def __init__(self):
        self.by_category: dict[str, int] = {}

    def add(self, category: str, n: int) -> None:
        self.by_category[category] = self.by_category.get(category, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.by_category.values())


@contextmanager
def count_flops():
    """Install a FlopCounter; ops executed inside the block report into it."""
    prev = _S.flops
    counter = FlopCounter()
    _S.flops = counter
    try:
        yield counter
    finally:
        _S.flops = prev


def _count(category: str, n: int) -> None:
    if _S.flops is not None:
        _S.flops.add(category, n)


class _Node:
    __slots__ = ("name", "inputs", "out", "backward_fn")

    def __init__(self, name, inputs, out, backward_fn):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Read-only view over the recorded tape (mostly for tests/debugging)."""

    @staticmethod
    def size() -> int:
        return len(_S.nodes)

    @staticmethod
    def op_names() -> list[str]:
        return [n.name for n in _S.nodes]


def clear_graph() -> None:
    """Drop every recorded node; call between training steps."""
    _S.nodes.clear()


def graph_size() -> int:
    return len(_S.nodes)


class Tensor:
    """Dense N-D value with an optional gradient buffer.

    Data is a contiguous numpy array in the current precision mode and is
    treated as immutable after creation; only ``grad`` is ever rewritten.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result in a Tensor and append a tape node if grads flow.

    ``backward_fn`` receives the output gradient and returns one gradient
    array (or None) per entry of ``inputs``.
    """
    if _S.check_finite and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"non-finite values produced by op {name!r}")
    needs = _S.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = _Node(name, tuple(inputs), out, backward_fn)
        _S.nodes.append(node)
        out.node = node
    return out


# ---------------------------------------------------------------------------
# creation


def _validate_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a tensor from array-like data, cast to the current precision."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=_S.dtype))
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    shape = _validate_shape(shape)
    return Tensor(np.zeros(shape, dtype=_S.dtype), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    shape = _validate_shape(shape)
    return Tensor(np.full(shape, value, dtype=_S.dtype), requires_grad=requires_grad)


def uniform(shape, seed: int, lo: float = -1.0, hi: float = 1.0,
            requires_grad: bool = False) -> Tensor:
    """Seed-deterministic uniform fill over [lo, hi)."""
    shape = _validate_shape(shape)
    rng = np.random.default_rng(seed)
    data = rng.uniform(lo, hi, size=shape).astype(_S.dtype)
    return Tensor(np.ascontiguousarray(data), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """Equal shapes, or b as a per-channel vector over a's channel axis."""
    if a.shape == b.shape:
        return "equal"
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "channel"
    raise ShapeError(f"incompatible shapes for elementwise op: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "equal":
        out = a.data + b.data
        _count("elementwise", out.size)

        def bwd(g):
            return g, g
    else:
        out = a.data + b.data[None, :, None, None]
        _count("elementwise", out.size)

        def bwd(g):
            return g, g.sum(axis=(0, 2, 3))
    return record("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "equal":
        out = a.data * b.data
        _count("elementwise", out.size)

        def bwd(g):
            return g * b.data, g * a.data
    else:
        bb = b.data[None, :, None, None]
        out = a.data * bb
        _count("elementwise", out.size)

        def bwd(g):
            return g * bb, (g * a.data).sum(axis=(0, 2, 3))
    return record("mul", (a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not a learnable value)."""
    c = a.data.dtype.type(c)
    out = a.data * c
    _count("elementwise", out.size)

    def bwd(g):
        return (g * c,)

    return record("scale", (a,), out, bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error activation, exact erf form."""
    from scipy.special import erf

    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf
    _count("elementwise", 4 * out.size)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return record("gelu", (a,), out.astype(x.dtype, copy=False), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch extents must agree exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    _count("matmul", batch * m * n * k)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return record("matmul", (a, b), out, bwd)


def softmax_axis(a: Tensor, axis: int) -> Tensor:
    """Max-subtracted exponential normalization along one axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", 3 * out.size)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return record("softmax", (a,), out, bwd)


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis, order preserved."""
    ts = list(ts)
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    first = ts[0]
    for t in ts[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels expects 4-D tensors")
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"spatial/batch mismatch in concat: {first.shape} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=1)
    widths = [t.shape[1] for t in ts]
    _count("elementwise", out.size)

    def bwd(g):
        pieces = []
        start = 0
        for w in widths:
            pieces.append(np.ascontiguousarray(g[:, start:start + w]))
            start += w
        return tuple(pieces)

    return record("concat", tuple(ts), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    out = np.ascontiguousarray(a.data).reshape(shape)

    def bwd(g):
        return (np.ascontiguousarray(g).reshape(a.shape),)

    return record("reshape", (a,), out, bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for ndim {a.ndim}")
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return record("transpose", (a,), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    """Reduce to a scalar (0-d) tensor."""
    out = np.asarray(a.data.sum(dtype=a.data.dtype))
    _count("elementwise", a.size)

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return record("sum_all", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires-grad leaf of the tape.

    Repeated calls without zeroing keep accumulating, which supports the
    usual step/zero-grad training loop.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_S.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.node is not None:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig
            else:
                t.grad = ig if t.grad is None else t.grad + ig


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central differences.

    Returns max over elements of |analytic - numeric| / max(1, |numeric|),
    with per-element step eps * max(1, |x_i|). Requires double precision.
    """
    if x.data.dtype != np.float64:
        raise ShapeError("grad_check requires a float64 tensor")
    start = len(_S.nodes)
    x.grad = None
    with finite_checks():
        y = f(x)
        if y.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        backward(y)
    del _S.nodes[start:]
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad(), finite_checks():
        for i in range(flat.size):
            h = eps * max(1.0, abs(float(flat[i])))
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
