# fleet_tensor.py
"""
fleet_tensor.py

Minimal dense tensor engine with reverse-mode automatic differentiation.

Design goals
- numpy arrays underneath; every op records its parents and a backward
  closure only when some input requires a gradient (define-by-run)
- the op set is exactly what the tokenizer, backbone, heads and losses use
- strict shapes: elementwise ops need equal shapes or a 0-d scalar operand;
  matmul broadcasts leading batch dims only; `expand` is the one explicit
  broadcasting op
- float32 for training, float64 for gradient verification (see `precision`)

A graph and its tensors belong to one execution context. Frozen tensors
(requires_grad=False) can be read from several contexts at once.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from fleet_errors import ContractError, DimensionError

# -----------------------------
# Types / precision policy
# -----------------------------
ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DTYPES: Dict[str, type] = {"float32": np.float32, "float64": np.float64}
_DEFAULT_DTYPE: type = np.float32

GELU_COEF = math.sqrt(2.0 / math.pi)


def set_default_dtype(dtype: Union[str, type]) -> None:
    """Set the dtype new tensors are created with ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"Unknown precision: {dtype!r} (expected one of {sorted(_DTYPES)})")
        dtype = _DTYPES[dtype]
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype: Union[str, type]) -> Iterator[None]:
    """Temporarily switch the default dtype."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


# -----------------------------
# Multiply counters (instrumentation)
# -----------------------------
@dataclass
class MultiplyCounter:
    """Scalar multiplies performed by matmul, keyed by op scope."""

    by_scope: Dict[str, int] = field(default_factory=dict)

    def add(self, scope: str, n: int) -> None:
        self.by_scope[scope] = self.by_scope.get(scope, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def get(self, scope: str) -> int:
        return self.by_scope.get(scope, 0)


_COUNTERS: List[MultiplyCounter] = []
_SCOPES: List[str] = []


@contextlib.contextmanager
def count_multiplies() -> Iterator[MultiplyCounter]:
    counter = MultiplyCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def op_scope(name: str) -> Iterator[None]:
    _SCOPES.append(name)
    try:
        yield
    finally:
        _SCOPES.pop()


def _record_multiplies(n: int) -> None:
    if not _COUNTERS:
        return
    scope = _SCOPES[-1] if _SCOPES else "other"
    for counter in _COUNTERS:
        counter.add(scope, n)


# -----------------------------
# Tensor
# -----------------------------
class Tensor:
    """Array + optional gradient + the op that produced it."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[type] = None,
        name: Optional[str] = None,
    ):
        self.data: np.ndarray = np.array(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op: Optional[str] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._op = None
        out._parents = ()
        out._backward = None
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req}{nm}{op})"

    # --- operators ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scalar_mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return take_slice(self, index)


def _as_tensor(x: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, requires_grad=False, dtype=dtype)


_GRAD_ENABLED: List[bool] = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Record nothing inside the block (evaluation, cached features)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    out = Tensor._wrap(np.asarray(data))
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only equal shapes or 0-d scalars)")


# -----------------------------
# Elementwise ops
# -----------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", backward)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _node(x.data * x.data.dtype.type(c), (x,), "scalar_mul", backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), "sigmoid", backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _node(t, (x,), "tanh", backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = GELU_COEF * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = GELU_COEF * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _node(out, (x,), "gelu", backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return mul(x, Tensor(keep, dtype=x.data.dtype))


# -----------------------------
# Reductions / losses
# -----------------------------
def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), "sum", backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scalar_mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(a, b) -> Tensor:
    """mean((a - b)^2) over all entries; shapes must match exactly."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ContractError("mse: empty operands")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        coef = 2.0 * g / n
        return coef * diff, -coef * diff

    return _node(np.asarray(np.mean(diff * diff)), (a, b), "mse", backward)


# -----------------------------
# Linear algebra / attention pieces
# -----------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[..., k, n]; leading batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims not broadcastable for {a.shape} @ {b.shape}") from None

    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _record_multiplies(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), "matmul", backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim with population variance, then gain/bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), "layer_norm", backward)


# -----------------------------
# Shape ops
# -----------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), "reshape", backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(x.data, axes), (x,), "transpose", backward)


def swap_last(x: Tensor, i: int, j: int) -> Tensor:
    """Swap two axes (negative indices allowed)."""
    axes = list(range(x.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(x, axes)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _node(out, (x,), "expand", backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no tensors")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, "stack", backward)


def take_slice(x: Tensor, index) -> Tensor:
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _node(np.array(out), (x,), "slice", backward)


def index_select(x: Tensor, axis: int, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    out = np.take(x.data, idx, axis=ax)
    unique = len(np.unique(idx)) == len(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        sel = [slice(None)] * x.ndim
        sel[ax] = idx
        if unique:
            gx[tuple(sel)] += g
        else:
            np.add.at(gx, tuple(sel), g)
        return (gx,)

    return _node(out, (x,), "index_select", backward)


def masked_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """1-D tensor of the entries where `mask` is True."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_select: mask {mask.shape} does not match {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[mask] = g
        return (gx,)

    return _node(x.data[mask], (x,), "masked_select", backward)


def fold(x: Tensor, stride: int) -> Tensor:
    """
    Overlap-average patch rows x[..., P, pl] back into a series of length
    (P - 1) * stride + pl. stride > pl would leave gaps and is rejected.
    """
    P, pl = x.shape[-2], x.shape[-1]
    if stride < 1 or stride > pl:
        raise DimensionError(f"fold: stride {stride} must be in [1, patch length {pl}]")
    lead = x.shape[:-2]
    span = (P - 1) * stride + pl

    if stride == pl:
        def backward_fast(g):
            return (g.reshape(x.shape),)

        return _node(x.data.reshape(lead + (span,)), (x,), "fold", backward_fast)

    counts = np.zeros(span, dtype=x.data.dtype)
    out = np.zeros(lead + (span,), dtype=x.data.dtype)
    for p in range(P):
        counts[p * stride:p * stride + pl] += 1
        out[..., p * stride:p * stride + pl] += x.data[..., p, :]
    out /= counts

    def backward(g):
        gs = g / counts
        windows = np.lib.stride_tricks.sliding_window_view(gs, pl, axis=-1)[..., ::stride, :]
        return (np.ascontiguousarray(windows[..., :P, :]),)

    return _node(out, (x,), "fold", backward)


# -----------------------------
# Tape + backward
# -----------------------------
@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor


@dataclass
class ComputationTape:
    """Recorded op nodes in topological order (inputs before consumers)."""

    nodes: List[TapeNode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        stack_: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            t, expanded = stack_.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack_.append((t, True))
            for p in t._parents:
                if id(p) not in visited:
                    stack_.append((p, False))
        return cls([TapeNode(t._op or "", t._parents, t) for t in order if t._backward is not None])


def backward(loss: Tensor) -> ComputationTape:
    """Fill .grad on every requires_grad tensor reachable from a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape.record(loss)
    if not tape.nodes and not loss.requires_grad:
        raise ContractError("backward: loss has no recorded graph (nothing requires grad)")

    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        out = node.output
        if out.grad is None:
            continue
        grads = out._backward(out.grad)
        for parent, g in zip(out._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype)
            else:
                parent.grad = parent.grad + g
    return tape


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -----------------------------
# Finite-difference oracle
# -----------------------------
def _scalar(v: Union[Tensor, float]) -> float:
    if isinstance(v, Tensor):
        if v.size != 1:
            raise ContractError(f"finite_diff_grad: f must return a scalar, got shape {v.shape}")
        return float(v.data.reshape(-1)[0])
    return float(v)


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x."""
    if h <= 0:
        raise ContractError(f"finite_diff_grad: h must be > 0, got {h}")
    if not x.data.flags.c_contiguous:
        x.data = np.array(x.data, order="C")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape), dtype=np.float64)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """
    ||a - b|| / max(||a||, ||b||, floor); 0 when both are (numerically) zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if max(na, nb) < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b)) / max(na, nb, floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-7,
) -> List[float]:
    """Relative error between backward() and central differences, per tensor."""
    zero_grad(tensors)
    backward(loss_fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    zero_grad(tensors)
    errors = []
    for t, a in zip(tensors, analytic):
        numeric = finite_diff_grad(lambda _x: loss_fn(), t, h)
        errors.append(relative_error(a, numeric.data, floor))
    return errors
