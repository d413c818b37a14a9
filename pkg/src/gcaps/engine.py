"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array together with an optional
gradient buffer and a record of the operation that produced it (operation
kind, parent tensors, and a backward closure).  Calling :func:`backward`
on a scalar tensor replays those records in reverse topological order and
accumulates gradients into every reachable tensor that requires them.

The tape is rebuilt on every forward pass (define-by-run).  Tensors are
treated as immutable after creation except for gradient accumulation and
the explicit in-place parameter updates performed by optimizers, which
must happen only after the tape that referenced them has been discarded.

Training runs in single precision; gradient checks build their graphs in
double precision, where central finite differences are trustworthy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

# Guard added under the square root of every norm denominator so that the
# gradient of ||v|| is defined (and zero) at v = 0.
EPS_NORM = 1e-12

# Sigmoid exponent clamp: exp(60) is finite in float32, so the forward pass
# can never overflow to inf/NaN on finite inputs.
SIGMOID_CLAMP = 60.0

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (cheap forward-only passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with shape metadata and an autodiff record.

    Attributes:
        data: numpy array, row-major, float32 or float64.
        grad: accumulated gradient, same shape as ``data`` (``None`` until
            backward reaches this tensor; trainable leaves start at zeros).
        requires_grad: whether gradients should flow into this tensor.
        op_kind: name of the producing operation ("" for leaves).
        parents: tensors this one was computed from (empty for leaves).
    """

    __slots__ = ("data", "grad", "requires_grad", "op_kind", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op_kind = ""
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op_kind or 'leaf'})"

    # Small amount of operator sugar; the module-level functions are the API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)


def _node(data: np.ndarray, parents: Sequence[Tensor], op_kind: str,
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    """Create an operation-output tensor, recording the tape node.

    ``backward`` receives the output gradient and is responsible for
    accumulating into the parents via :func:`_accum`.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.op_kind = op_kind
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.op_kind = op_kind
        out.parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, value: np.ndarray):
    """Accumulate ``value`` into ``t.grad`` (no-op for non-trainable tensors)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += value


def backward(loss: Tensor):
    """Populate gradients of everything reachable from a scalar loss.

    Raises ValueError if ``loss`` is not scalar.  Visits every recorded
    node exactly once, in reverse topological order.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError("backward on a non-finite loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ValueError(f"cannot reshape {t.shape} (size {t.size}) to {shape}")
    old_shape = t.shape

    def bw(g):
        _accum(t, g.reshape(old_shape))

    return _node(t.data.reshape(shape), (t,), "reshape", bw)


def permute(t: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.data.ndim)):
        raise ValueError(f"invalid permutation {axes} for tensor of rank {t.data.ndim}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(t, g.transpose(inverse))

    return _node(t.data.transpose(axes), (t,), "permute", bw)


def tensor_view(t: Tensor, spec) -> Tensor:
    """Reshape or permute, dispatching on the argument.

    A sequence whose sorted entries are 0..rank-1 with length equal to the
    tensor rank is treated as an axis permutation, anything else as a new
    shape.  Gradient flows as the inverse view either way.
    """
    spec = tuple(int(s) for s in spec)
    if len(spec) == t.data.ndim and sorted(spec) == list(range(t.data.ndim)) and t.data.ndim > 0:
        return permute(t, spec)
    return reshape(t, spec)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``t[..., start:start+length, ...]`` along one axis."""
    if not (0 <= start and start + length <= t.shape[axis]):
        raise ValueError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {t.shape}")
    index = [slice(None)] * t.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bw(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad[index] += g

    return _node(t.data[index], (t,), "narrow", bw)


def stack0(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=0)

    def bw(g):
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return _node(data, tensors, "stack0", bw)


def tile_leading(t: Tensor, reps: int) -> Tensor:
    """Repeat a tensor ``reps`` times along a new leading axis.

    The backward rule sums the repeated gradients, which makes this the
    autodiff-correct way to share one parameter across several sites.
    """
    data = np.ascontiguousarray(np.broadcast_to(t.data, (reps,) + t.shape))

    def bw(g):
        _accum(t, g.sum(axis=0))

    return _node(data, (t,), "tile_leading", bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a feature-axis bias ``b`` of shape (F,) to every row of ``x`` (B, F)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias expects (B,F) and (F,), got {x.shape} and {b.shape}")

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _node(x.data + b.data[None, :], (x, b), "add_bias", bw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D cross-correlation with per-channel bias.

    x: (B, Cin, H, W); kernels: (Cout, Cin, kh, kw); bias: (Cout,).
    Output spatial extents are floor((H - kh) / stride) + 1 and likewise
    for width.  Implemented as a sum of strided slices against per-offset
    kernel matrices, which keeps memory flat and feeds BLAS well.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError(f"conv2d expects (B,Cin,H,W) and (Cout,Cin,kh,kw), got {x.shape} and {kernels.shape}")
    batch, cin, height, width = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernels expect {kcin}")
    if kh > height or kw > width:
        raise ValueError(f"kernel {kh}x{kw} larger than input {height}x{width}")
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh = (height - kh) // stride + 1
    ow = (width - kw) // stride + 1

    def window(arr, i, j):
        return arr[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]

    acc = np.zeros((batch * oh * ow, cout), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = window(x.data, i, j)  # (B, Cin, oh, ow)
            xs_mat = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(batch * oh * ow, cin)
            acc += xs_mat @ kernels.data[:, :, i, j].T
    out = acc.reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]

    def bw(g):
        _accum(bias, g.sum(axis=(0, 2, 3)))
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(batch * oh * ow, cout)
        dk = np.zeros_like(kernels.data) if kernels.requires_grad else None
        dx = np.zeros_like(x.data) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if dk is not None:
                    xs = window(x.data, i, j)
                    xs_mat = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(batch * oh * ow, cin)
                    dk[:, :, i, j] = g_mat.T @ xs_mat
                if dx is not None:
                    dxs = (g_mat @ kernels.data[:, :, i, j]).reshape(batch, oh, ow, cin)
                    window(dx, i, j)[...] += dxs.transpose(0, 3, 1, 2)
        if dk is not None:
            _accum(kernels, dk)
        if dx is not None:
            _accum(x, dx)

    return _node(out, (x, kernels, bias), "conv2d", bw)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary_operands(a: Tensor, b) -> tuple[Tensor, Tensor | float]:
    """Validate shapes for binary elementwise ops: equal, or one side scalar."""
    if isinstance(b, Tensor):
        if a.shape == b.shape or b.data.shape == () or a.data.shape == ():
            return a, b
        raise ValueError(f"elementwise shapes disagree: {a.shape} vs {b.shape} "
                         "(only scalar-with-tensor broadcasting is supported)")
    return a, float(b)


def add(a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        def bw(g):
            _accum(a, g)
        return _node(a.data + b, (a,), "add", bw)

    def bw(g):
        _accum(a, g if a.shape == g.shape else np.sum(g))
        _accum(b, g if b.shape == g.shape else np.sum(g))

    return _node(a.data + b.data, (a, b), "add", bw)


def mul(a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        def bw(g):
            _accum(a, g * b)
        return _node(a.data * b, (a,), "mul", bw)

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga if a.shape == ga.shape else np.sum(ga))
        _accum(b, gb if b.shape == gb.shape else np.sum(gb))

    return _node(a.data * b.data, (a, b), "mul", bw)


def scale(t: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bw(g):
        _accum(t, g * factor)

    return _node(t.data * factor, (t,), "scale", bw)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0  # subgradient at 0 is 0

    def bw(g):
        _accum(t, g * mask)

    return _node(np.where(mask, t.data, 0.0).astype(t.data.dtype, copy=False), (t,), "relu", bw)


def sigmoid(t: Tensor) -> Tensor:
    clamped = np.clip(t.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    s = 1.0 / (1.0 + np.exp(-clamped))

    def bw(g):
        _accum(t, g * s * (1.0 - s))

    return _node(s, (t,), "sigmoid", bw)


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "scale": scale}


def elementwise(t: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch an elementwise op by name.

    Binary kinds (add, mul, scale) take ``other``: a same-shape tensor or a
    scalar for add/mul, a scalar for scale.
    """
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {sorted(_ELEMENTWISE)}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "mul", "scale"):
        if other is None:
            raise ValueError(f"elementwise {kind!r} needs a second operand")
        return fn(t, other)
    return fn(t)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)
    shape = t.shape

    def bw(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, shape).astype(t.data.dtype, copy=False))
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(g_exp, shape))

    return _node(data, (t,), "reduce_sum", bw)


def reduce_norm(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis.

    The forward value is the exact sqrt of the sum of squares; the backward
    rule divides by sqrt(sum + EPS_NORM) so the gradient at a zero vector is
    defined (and equal to zero).
    """
    axis = int(axis)
    if not (-t.data.ndim <= axis < t.data.ndim):
        raise ValueError(f"axis {axis} out of range for rank {t.data.ndim}")
    sumsq = np.sum(t.data * t.data, axis=axis, keepdims=True)
    norm = np.sqrt(sumsq)
    inv_guarded = 1.0 / np.sqrt(sumsq + EPS_NORM)
    data = norm if keepdims else np.squeeze(norm, axis=axis)

    def bw(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        _accum(t, g_exp * t.data * inv_guarded)

    return _node(data, (t,), "reduce_norm", bw)


def softmax_lastaxis(t: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        _accum(t, s * (g - dot))

    return _node(s, (t,), "softmax", bw)


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------

def finite_diff_gradient(f, t: Tensor, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function of ``t``.

    ``f`` must be pure and deterministic; it is re-run 2*t.size times with
    single elements of ``t.data`` perturbed in place (and restored).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            f_plus = float(f(t).data)
            flat[i] = saved - epsilon
            f_minus = float(f(t).data)
            flat[i] = saved
            grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad.reshape(t.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Worst-case relative error between two gradient arrays.

    The denominator is floored so tiny gradients are compared absolutely
    rather than blowing up the ratio on finite-difference noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
