"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operator is registered by name in a global registry and
supplies a forward rule plus a backward closure. Applying an operator records
a node on the active tape; `backward` replays the tape in exact reverse
recording order, accumulating gradients additively across fan-out.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

_MASK64 = (1 << 64) - 1
_SM_GOLDEN = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB


class Rng:
    """SplitMix64 generator. The u64/uniform stream is bit-exact everywhere;
    normals go through Box-Muller and inherit the platform's libm rounding."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _SM_GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _SM_MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _SM_MIX2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def uniforms(self, n: int) -> np.ndarray:
        """Vectorized draw of n uniforms; advances the state exactly n steps."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + idx * np.uint64(_SM_GOLDEN)
        self.state = (self.state + n * _SM_GOLDEN) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller; consumes 2*ceil(n/2) raw draws."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1 = np.maximum(u[0::2], 2.0**-53)  # guard log(0)
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        t = (2.0 * math.pi) * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(t)
        out[1::2] = r * np.sin(t)
        return out[:n]


def _check_shape(shape: Sequence[int]) -> tuple:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ShapeError("shape must be nonempty")
    for d in dims:
        if d < 1:
            raise ShapeError(f"invalid shape {dims}: dimensions must be >= 1")
    return dims


class Tensor:
    """Row-major float64 array plus an optional gradient buffer.

    Leaves created with requires_grad=True get a zero gradient buffer up
    front; operator outputs receive one lazily on first backward touch.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.size == 0:
            raise ShapeError(f"invalid shape {arr.shape}: zero-size tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, what: str = "tensor") -> None:
        if not self.is_finite():
            raise NonFiniteError(f"non-finite values in {what}")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar over the registered elementwise ops.
    def __add__(self, other):
        return ew("add", self, other)

    def __radd__(self, other):
        return ew("add", self, other)

    def __sub__(self, other):
        return ew("sub", self, other)

    def __mul__(self, other):
        return ew("mul", self, other)

    def __rmul__(self, other):
        return ew("mul", self, other)

    def __truediv__(self, other):
        return ew("div", self, other)

    def __neg__(self):
        return ew("mul", self, -1.0)


class Node:
    """One tape entry: operator name, inputs, output, and the backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "tape", "epoch")

    def __init__(self, op, inputs, output, backward_fn, tape, epoch):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.epoch = epoch


class Tape:
    """Ordered record of operator applications; replayed in reverse by backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.epoch = 0
        self.consumed = False

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn) -> None:
        node = Node(op, inputs, output, backward_fn, self, self.epoch)
        output.node = node
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.epoch += 1
        self.consumed = False

    def op_sequence(self) -> list[str]:
        return [n.op for n in self.nodes]

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_ENABLED: list[bool] = [True]


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


def reset_tape() -> None:
    active_tape().reset()


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


# --- operator registry ----------------------------------------------------

# name -> forward builder: fn(*arrays, **attrs) -> (out_array, backward_fn)
# backward_fn(grad_out_array) -> tuple of per-input gradient arrays (or None).
_OPS: dict[str, Callable] = {}


def register_op(name: str):
    def deco(fn):
        if name in _OPS:
            raise ValueError(f"operator '{name}' already registered")
        _OPS[name] = fn
        return fn

    return deco


def registered_ops() -> list[str]:
    return sorted(_OPS)


def get_op(name: str) -> Callable:
    return _OPS[name]


def set_op(name: str, fn: Callable) -> Callable:
    """Swap an operator implementation (test fixtures); returns the old one."""
    old = _OPS[name]
    _OPS[name] = fn
    return old


def apply_op(name: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    if name not in _OPS:
        raise KeyError(f"unknown operator '{name}'")
    arrays = [t.data for t in inputs]
    out_data, backward_fn = _OPS[name](*arrays, **attrs)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"operator '{name}' produced non-finite values")
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_tape().record(name, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None, on_visit=None) -> None:
    """Populate .grad of every requires_grad leaf reachable from `loss`.

    Visits the tape nodes in exact reverse recording order; fan-out gradients
    accumulate additively. `on_visit(op_name)` is called per visited node.

    A tape is single-use: each node is released as soon as its backward rule
    has run (dropping the output gradient, the closure, and the output<->node
    link), so the whole graph is freed by refcounting alone instead of waiting
    on the cycle collector. Only leaf tensors keep their gradients.
    """
    tape = tape if tape is not None else active_tape()
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward already consumed this tape")
    node = loss.node
    if node is not None:
        if node.tape is not tape:
            raise TapeError("loss was recorded on a different tape")
        if node.epoch != tape.epoch:
            raise TapeError("tensor used after tape reset")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + 1.0
    tape.consumed = True
    for n in reversed(tape.nodes):
        out = n.output
        gout = out.grad
        if gout is not None:
            if on_visit is not None:
                on_visit(n.op)
            grads = n.backward_fn(gout)
            for t, gi in zip(n.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
        out.grad = None
        out.node = None
        n.output = None
        n.inputs = ()
        n.backward_fn = None
        n.tape = None


# --- constructors ----------------------------------------------------------


def full(shape: Sequence[int], value: float) -> Tensor:
    dims = _check_shape(shape)
    return Tensor(np.full(dims, float(value), dtype=np.float64))


def zeros(shape: Sequence[int]) -> Tensor:
    return full(shape, 0.0)


def ones(shape: Sequence[int]) -> Tensor:
    return full(shape, 1.0)


def randn(shape: Sequence[int], rng: Rng) -> Tensor:
    dims = _check_shape(shape)
    n = 1
    for d in dims:
        n *= d
    return Tensor(rng.normals(n).reshape(dims))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# --- elementwise arithmetic -------------------------------------------------


def _ew_shapes(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_like(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # Undo scalar broadcast: collapse the gradient back to the operand shape.
    if g.shape == ref.shape:
        return g
    return np.full(ref.shape, g.sum(), dtype=np.float64) if ref.size == 1 else g


@register_op("add")
def _op_add(a, b):
    _ew_shapes("add", a, b)
    out = a + b

    def bw(g):
        return _reduce_like(g, a), _reduce_like(g, b)

    return out, bw


@register_op("sub")
def _op_sub(a, b):
    _ew_shapes("sub", a, b)
    out = a - b

    def bw(g):
        return _reduce_like(g, a), _reduce_like(-g, b)

    return out, bw


@register_op("mul")
def _op_mul(a, b):
    _ew_shapes("mul", a, b)
    out = a * b

    def bw(g):
        return _reduce_like(g * b, a), _reduce_like(g * a, b)

    return out, bw


@register_op("div")
def _op_div(a, b):
    _ew_shapes("div", a, b)
    if np.any(b == 0.0):
        raise NonFiniteError("div: division by exact zero")
    out = a / b

    def bw(g):
        return _reduce_like(g / b, a), _reduce_like(-g * a / (b * b), b)

    return out, bw


_EW_KINDS = ("add", "sub", "mul", "div")


def ew(op_kind: str, a: Tensor, b) -> Tensor:
    """Elementwise arithmetic; operands must have equal shapes or one may be
    a scalar (python number or size-1 tensor)."""
    if op_kind not in _EW_KINDS:
        raise ValueError(f"ew: unknown op_kind '{op_kind}'")
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(float(b), dtype=np.float64).reshape(1))
    return apply_op(op_kind, (a, b))


@register_op("exp")
def _op_exp(a):
    if a.size and np.max(a) > 700.0:
        raise NonFiniteError("exp: input above 700 would overflow")
    out = np.exp(a)

    def bw(g):
        return (g * out,)

    return out, bw


def exp(a: Tensor) -> Tensor:
    return apply_op("exp", (a,))


# --- reductions --------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        a = int(ax)
        if a < 0:
            a += ndim
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(a)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes {axes}")
    return tuple(sorted(out))


def _keep_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


@register_op("reduce_sum")
def _op_reduce_sum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)
    kshape = _keep_shape(a.shape, axes)

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape), a.shape),)

    return out, bw


@register_op("reduce_mean")
def _op_reduce_mean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    out = a.mean(axis=axes, keepdims=keepdims)
    kshape = _keep_shape(a.shape, axes)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape), a.shape) / count,)

    return out, bw


@register_op("reduce_max")
def _op_reduce_max(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    moved = a.transpose(perm)
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = flat.argmax(axis=-1)  # first maximal index wins ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = out.reshape(_keep_shape(a.shape, axes)) if keepdims else out

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(kept_shape)[..., None], axis=-1)
        red_shape = tuple(a.shape[i] for i in axes)
        ginp = gflat.reshape(kept_shape + red_shape)
        inv = np.argsort(perm)
        return (ginp.transpose(inv),)

    return out, bw


def reduce(a: Tensor, axes=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    if mode not in ("sum", "mean", "max"):
        raise ValueError(f"reduce: unknown mode '{mode}'")
    return apply_op(f"reduce_{mode}", (a,), axes=axes, keepdims=keepdims)


# --- shape manipulation -------------------------------------------------------


@register_op("reshape")
def _op_reshape(a, shape=None):
    dims = tuple(int(d) for d in shape)
    n = 1
    for d in dims:
        n *= d
    if n != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, target {dims} has {n}")
    out = a.reshape(dims)

    def bw(g):
        return (g.reshape(a.shape),)

    return out, bw


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op("reshape", (a,), shape=tuple(shape))


@register_op("concat")
def _op_concat(*arrays, axis=0):
    ndim = arrays[0].ndim
    ax = axis if axis >= 0 else axis + ndim
    if not 0 <= ax < ndim:
        raise ShapeError(f"concat: axis {axis} out of range")
    base = list(arrays[0].shape)
    for arr in arrays[1:]:
        other = list(arr.shape)
        if len(other) != ndim or [d for i, d in enumerate(other) if i != ax] != [
            d for i, d in enumerate(base) if i != ax
        ]:
            raise ShapeError(f"concat: non-concat dims disagree: {arrays[0].shape} vs {arr.shape}")
    out = np.concatenate(arrays, axis=ax)
    sizes = [arr.shape[ax] for arr in arrays]

    def bw(g):
        pieces = []
        start = 0
        for s in sizes:
            sl = [slice(None)] * ndim
            sl[ax] = slice(start, start + s)
            pieces.append(g[tuple(sl)])
            start += s
        return tuple(pieces)

    return out, bw


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_op("concat", tuple(tensors), axis=axis)


@register_op("slice")
def _op_slice(a, starts=None, stops=None):
    if len(starts) != a.ndim or len(stops) != a.ndim:
        raise ShapeError("slice: starts/stops must cover every axis")
    sl = []
    for ax, (lo, hi) in enumerate(zip(starts, stops)):
        if not (0 <= lo < hi <= a.shape[ax]):
            raise ShapeError(f"slice: bounds [{lo},{hi}) invalid for axis {ax} of size {a.shape[ax]}")
        sl.append(slice(lo, hi))
    sl = tuple(sl)
    out = a[sl]

    def bw(g):
        ga = np.zeros_like(a)
        ga[sl] = g
        return (ga,)

    return out, bw


def slice_tensor(a: Tensor, starts: Sequence[int], stops: Sequence[int]) -> Tensor:
    return apply_op("slice", (a,), starts=tuple(starts), stops=tuple(stops))


@register_op("permute")
def _op_permute(a, perm=None):
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"permute: {perm} is not a permutation of {a.ndim} axes")
    out = a.transpose(perm)
    inv = tuple(np.argsort(perm))

    def bw(g):
        return (g.transpose(inv),)

    return out, bw


def permute(a: Tensor, perm: Sequence[int]) -> Tensor:
    return apply_op("permute", (a,), perm=tuple(perm))


# --- batched matmul and softmax ------------------------------------------------


@register_op("bmm")
def _op_bmm(a, b):
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")
    out = np.matmul(a, b)

    def bw(g):
        return np.matmul(g, b.transpose(0, 2, 1)), np.matmul(a.transpose(0, 2, 1), g)

    return out, bw


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [B,M,K] x [B,K,N] -> [B,M,N]."""
    return apply_op("bmm", (a, b))


@register_op("softmax")
def _op_softmax(a, axis=-1):
    ax = axis if axis >= 0 else axis + a.ndim
    if not 0 <= ax < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range")
    shifted = a - a.max(axis=ax, keepdims=True)  # stability
    e = np.exp(shifted)
    p = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=ax, keepdims=True)
        return (p * (g - dot),)

    return p, bw


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_op("softmax", (a,), axis=axis)
