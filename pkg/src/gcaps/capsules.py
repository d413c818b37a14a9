"""Capsule packing, transformation, trainable-coupling aggregation and
capsule nonlinearities.

A capsule is a group of activations treated as one vector/matrix entity:
its Euclidean norm scores the presence of an entity, its orientation the
pose.  Instead of computing the child-to-parent coupling coefficients by
an iterative routing loop, the layers here hold them as ordinary trainable
parameters so they are learned jointly with everything else.

The fused operations (transform, coupled sum, squash, capsule relu) carry
hand-derived backward rules registered on the autodiff tape; the test
suite verifies each against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .engine import EPS_NORM, Tensor, _accum, _node

SQUASH_VARIANTS = ("ratio", "exp")
PACK_MODES = ("across", "within")


@dataclass
class CapsuleTensor:
    """A batch of capsules: data shaped (batch, num_capsules, *capsule_shape)."""

    data: Tensor
    capsule_shape: tuple[int, ...]

    def __post_init__(self):
        self.capsule_shape = tuple(int(s) for s in self.capsule_shape)
        expected_rank = 2 + len(self.capsule_shape)
        if self.data.data.ndim != expected_rank:
            raise ValueError(f"capsule data rank {self.data.data.ndim} != expected {expected_rank}")
        if self.data.shape[2:] != self.capsule_shape:
            raise ValueError(f"trailing axes {self.data.shape[2:]} != capsule shape {self.capsule_shape}")
        if self.num_capsules < 1 or any(s < 1 for s in self.capsule_shape):
            raise ValueError("capsule counts and extents must be >= 1")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def num_capsules(self) -> int:
        return self.data.shape[1]

    @property
    def capsule_dim(self) -> int:
        return int(np.prod(self.capsule_shape, dtype=np.int64))


@dataclass
class SpatialCapsuleTensor:
    """Capsules on a spatial grid: data shaped (batch, types, H, W, *capsule_shape)."""

    data: Tensor
    capsule_shape: tuple[int, ...]

    def __post_init__(self):
        self.capsule_shape = tuple(int(s) for s in self.capsule_shape)
        if self.data.shape[4:] != self.capsule_shape:
            raise ValueError(f"trailing axes {self.data.shape[4:]} != capsule shape {self.capsule_shape}")

    @property
    def types(self) -> int:
        return self.data.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]


@dataclass
class CapsuleFCParams:
    """Fully-connected capsule layer parameters.

    W maps each (child i, parent j) pair through a (d_in, d_out) matrix;
    c holds one trainable coupling coefficient per pair.  ``out_shape`` is
    the capsule shape the flattened d_out axis folds back into.
    """

    W: Tensor
    c: Tensor
    out_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.W.data.ndim != 4:
            raise ValueError(f"W must be (num_in, num_out, d_in, d_out), got {self.W.shape}")
        if self.c.shape != self.W.shape[:2]:
            raise ValueError(f"c shape {self.c.shape} != (num_in, num_out) {self.W.shape[:2]}")
        if not self.out_shape:
            self.out_shape = (self.W.shape[3],)
        if int(np.prod(self.out_shape, dtype=np.int64)) != self.W.shape[3]:
            raise ValueError(f"out_shape {self.out_shape} does not flatten to d_out {self.W.shape[3]}")

    @classmethod
    def create(cls, num_in: int, num_out: int, d_in: int, out_shape: Sequence[int],
               rng: np.random.Generator, dtype=np.float32, w_std: float = 0.05):
        out_shape = tuple(int(s) for s in out_shape)
        d_out = int(np.prod(out_shape, dtype=np.int64))
        w = rng.normal(0.0, w_std, size=(num_in, num_out, d_in, d_out))
        c = np.full((num_in, num_out), 1.0 / num_out)
        return cls(W=Tensor(w, requires_grad=True, dtype=dtype),
                   c=Tensor(c, requires_grad=True, dtype=dtype),
                   out_shape=out_shape)


@dataclass
class CapsuleConvParams:
    """Convolutional capsule layer parameters.

    W is shared across spatial positions (types_in, types_out, d_in, d_out);
    c has one coefficient per (output position, kernel offset, child type,
    parent type), shaped (positions_out, kh*kw, types_in, types_out).
    """

    W: Tensor
    c: Tensor
    kernel: tuple[int, int]
    stride: int = 1
    out_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.W.data.ndim != 4:
            raise ValueError(f"W must be (types_in, types_out, d_in, d_out), got {self.W.shape}")
        kh, kw = self.kernel
        if self.c.data.ndim != 4 or self.c.shape[1] != kh * kw or self.c.shape[2:] != (self.W.shape[0], self.W.shape[1]):
            raise ValueError(f"c shape {self.c.shape} inconsistent with kernel {self.kernel} and W {self.W.shape}")
        if not self.out_shape:
            self.out_shape = (self.W.shape[3],)
        if int(np.prod(self.out_shape, dtype=np.int64)) != self.W.shape[3]:
            raise ValueError(f"out_shape {self.out_shape} does not flatten to d_out {self.W.shape[3]}")

    @classmethod
    def create(cls, types_in: int, types_out: int, d_in: int, out_shape: Sequence[int],
               kernel: tuple[int, int], positions_out: int, stride: int,
               rng: np.random.Generator, dtype=np.float32, w_std: float = 0.05):
        out_shape = tuple(int(s) for s in out_shape)
        d_out = int(np.prod(out_shape, dtype=np.int64))
        kh, kw = kernel
        w = rng.normal(0.0, w_std, size=(types_in, types_out, d_in, d_out))
        c = np.full((positions_out, kh * kw, types_in, types_out), 1.0 / types_out)
        return cls(W=Tensor(w, requires_grad=True, dtype=dtype),
                   c=Tensor(c, requires_grad=True, dtype=dtype),
                   kernel=(kh, kw), stride=stride, out_shape=out_shape)


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

def pack_capsules(maps: Tensor, mode: str, dim: int) -> CapsuleTensor:
    """Group conv feature maps (B, C, H, W) into capsules.

    across: the capsule at (group g, position h, w) collects the elements
    at that position from maps g*dim .. g*dim+dim-1.  within: each capsule
    is one row of one feature map, so dim must equal the map width.  Both
    modes are pure views (bijections on the underlying scalars).
    """
    if mode not in PACK_MODES:
        raise ValueError(f"unknown packing mode {mode!r}")
    b, c, h, w = maps.shape
    if mode == "across":
        if dim < 1 or c % dim != 0:
            raise ValueError(f"across packing needs dim dividing channel count, got C={c}, dim={dim}")
        groups = c // dim
        t = engine.reshape(maps, (b, groups, dim, h, w))
        t = engine.permute(t, (0, 1, 3, 4, 2))
        t = engine.reshape(t, (b, groups * h * w, dim))
        return CapsuleTensor(t, (dim,))
    if w != dim:
        raise ValueError(f"within packing needs dim == map width, got W={w}, dim={dim}")
    return CapsuleTensor(engine.reshape(maps, (b, c * h, w)), (dim,))


def unpack_capsules(caps: CapsuleTensor, mode: str, channels: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`pack_capsules`; returns the (B, C, H, W) map tensor."""
    if mode not in PACK_MODES:
        raise ValueError(f"unknown packing mode {mode!r}")
    b = caps.batch
    dim = caps.capsule_shape[0]
    if mode == "across":
        groups = channels // dim
        t = engine.reshape(caps.data, (b, groups, height, width, dim))
        t = engine.permute(t, (0, 1, 4, 2, 3))
        return engine.reshape(t, (b, channels, height, width))
    return engine.reshape(caps.data, (b, channels, height, width))


def pack_capsule_grid(maps: Tensor, dim: int) -> SpatialCapsuleTensor:
    """Across-mode packing that keeps the spatial grid: (B, C, H, W) -> (B, C/dim, H, W, dim)."""
    b, c, h, w = maps.shape
    if dim < 1 or c % dim != 0:
        raise ValueError(f"grid packing needs dim dividing channel count, got C={c}, dim={dim}")
    groups = c // dim
    t = engine.reshape(maps, (b, groups, dim, h, w))
    t = engine.permute(t, (0, 1, 3, 4, 2))
    return SpatialCapsuleTensor(t, (dim,))


# ---------------------------------------------------------------------------
# fused capsule ops
# ---------------------------------------------------------------------------

def capsule_transform(u: CapsuleTensor, W: Tensor) -> Tensor:
    """Per-pair linear map of child capsules to parent predictions.

    Contracts the last capsule axis of ``u`` (extent d_in) against W of
    shape (num_in, num_out, d_in, d_out).  Returns the prediction tensor
    shaped (batch, num_in, num_out, m_pre, d_out) where m_pre flattens the
    leading capsule axes (1 for plain vector capsules).
    """
    num_in, num_out, d_in, d_out = W.shape
    if u.num_capsules != num_in:
        raise ValueError(f"child count {u.num_capsules} != W num_in {num_in}")
    if u.capsule_shape[-1] != d_in:
        raise ValueError(f"child capsule last axis {u.capsule_shape[-1]} != W d_in {d_in}")
    b = u.batch
    m_pre = int(np.prod(u.capsule_shape[:-1], dtype=np.int64))
    t = u.data
    u3 = t.data.reshape(b, num_in, m_pre, d_in)
    out = np.einsum("bnpq,njqd->bnjpd", u3, W.data, optimize=True)

    def bw(g):
        if t.requires_grad:
            du = np.einsum("bnjpd,njqd->bnpq", g, W.data, optimize=True)
            _accum(t, du.reshape(t.shape))
        if W.requires_grad:
            _accum(W, np.einsum("bnpq,bnjpd->njqd", u3, g, optimize=True))

    return _node(out, (t, W), "capsule_transform", bw)


def coupled_sum(predictions: Tensor, c: Tensor) -> Tensor:
    """Coupling-weighted sum of parent predictions over children.

    predictions: (batch, num_in, num_out, ...); c: (num_in, num_out).
    Returns (batch, num_out, ...).  Gradient flows into both operands, so
    the coefficients train like any other parameter.
    """
    if c.data.ndim != 2 or predictions.shape[1:3] != c.shape:
        raise ValueError(f"coupling shape {c.shape} != prediction (num_in, num_out) {predictions.shape[1:3]}")

    out = np.einsum("bnj...,nj->bj...", predictions.data, c.data, optimize=True)

    def bw(g):
        if predictions.requires_grad:
            _accum(predictions, np.einsum("bj...,nj->bnj...", g, c.data, optimize=True))
        if c.requires_grad:
            _accum(c, np.einsum("bnj...,bj...->nj", predictions.data, g, optimize=True))

    return _node(out, (predictions, c), "coupled_sum", bw)


def _squash_core(x: np.ndarray, variant: str):
    """Forward squash over the last axis plus the pieces backward needs."""
    sumsq = np.sum(x * x, axis=-1, keepdims=True)
    n = np.sqrt(sumsq)
    inv_guarded = 1.0 / np.sqrt(sumsq + EPS_NORM)
    if variant == "ratio":
        # s(n) = n / (1 + n^2); no division by n, so the forward is exact.
        s = n / (1.0 + sumsq)
        ds_dn = (1.0 - sumsq) / (1.0 + sumsq) ** 2
    elif variant == "exp":
        expn = np.exp(-n)
        s = (1.0 - expn) * inv_guarded
        ds_dn = expn * inv_guarded - (1.0 - expn) * inv_guarded * inv_guarded
    else:
        raise ValueError(f"unknown squash variant {variant!r}")
    return x * s, s, ds_dn, inv_guarded


def _norm_gated(t: Tensor, op_kind: str, core) -> Tensor:
    """Build a tape node for a per-capsule gate out = x * s(||x||).

    ``core`` computes (out, s, ds_dn, inv_guarded) over the last axis.
    The shared backward rule is g*s + (g.x) * ds_dn * x / ||x||_guarded.
    """
    out, s, ds_dn, inv_guarded = core(t.data)

    def bw(g):
        gdotx = np.sum(g * t.data, axis=-1, keepdims=True)
        _accum(t, g * s + gdotx * ds_dn * inv_guarded * t.data)

    return _node(out, (t,), op_kind, bw)


def _flatten_caps(v) -> tuple[Tensor, tuple[int, ...], tuple[int, ...]]:
    """View capsule data as (..., capsule_dim) for the norm-gated ops."""
    lead = v.data.shape[:v.data.data.ndim - len(v.capsule_shape)]
    dim = int(np.prod(v.capsule_shape, dtype=np.int64))
    return engine.reshape(v.data, lead + (dim,)), lead, v.data.shape


def squash(v, variant: str = "ratio"):
    """Norm-bounding capsule nonlinearity (both published variants).

    ratio: v' = (||v||^2 / (1 + ||v||^2)) * v/||v||
    exp:   v' = (1 - e^{-||v||}) * v/||v||

    Preserves direction, keeps the output norm in [0, 1), and maps the zero
    capsule to the zero capsule.  Operates on the full (possibly multi-axis)
    capsule shape.  Accepts and returns CapsuleTensor or SpatialCapsuleTensor.
    """
    if variant not in SQUASH_VARIANTS:
        raise ValueError(f"unknown squash variant {variant!r}")
    flat, _, orig_shape = _flatten_caps(v)
    gated = _norm_gated(flat, f"squash_{variant}", lambda x: _squash_core(x, variant))
    out = engine.reshape(gated, orig_shape)
    return type(v)(out, v.capsule_shape)


def capsule_relu(v, tau: float = 0.2):
    """Soft norm gate: v' = max(0, ||v|| - tau) * v/||v||.

    Zeroes weak capsules while preserving the direction of strong ones;
    used between stacked capsule layers to fight saturation.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")

    def core(x):
        sumsq = np.sum(x * x, axis=-1, keepdims=True)
        n = np.sqrt(sumsq)
        inv_guarded = 1.0 / np.sqrt(sumsq + EPS_NORM)
        active = n > tau
        r = np.where(active, n - tau, 0.0)
        s = r * inv_guarded
        ds_dn = np.where(active, inv_guarded - r * n * inv_guarded ** 3, 0.0)
        return x * s, s, ds_dn, inv_guarded

    flat, _, orig_shape = _flatten_caps(v)
    gated = _norm_gated(flat, "capsule_relu", core)
    out = engine.reshape(gated, orig_shape)
    return type(v)(out, v.capsule_shape)


def capsule_norms(v: CapsuleTensor) -> Tensor:
    """Euclidean norm of each capsule: (batch, num_capsules).

    The argmax over capsules is the predicted class when the capsules are
    class capsules.
    """
    flat, lead, _ = _flatten_caps(v)
    return engine.reduce_norm(flat, axis=len(lead))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _effective_coupling(c: Tensor, softmax_mode: bool) -> Tensor:
    """Raw trainable coefficients, or parent-axis softmax of them."""
    return engine.softmax_lastaxis(c) if softmax_mode else c


def capsule_fc_forward(u: CapsuleTensor, params: CapsuleFCParams, variant: str = "ratio",
                       coupling_softmax: bool = False) -> CapsuleTensor:
    """Fully-connected capsule layer: transform, couple, squash."""
    c = _effective_coupling(params.c, coupling_softmax)
    pred = capsule_transform(u, params.W)           # (B, N, J, m_pre, d_out)
    v = coupled_sum(pred, c)                        # (B, J, m_pre, d_out)
    out_shape = u.capsule_shape[:-1] + params.out_shape
    v = engine.reshape(v, (u.batch, params.W.shape[1]) + out_shape)
    return squash(CapsuleTensor(v, out_shape), variant)


def capsule_conv_forward(u: SpatialCapsuleTensor, params: CapsuleConvParams, variant: str = "ratio",
                         coupling_softmax: bool = False) -> CapsuleTensor:
    """Convolutional capsule layer.

    For each output position, gathers the child capsules inside the kernel
    window (offset-major, then child type), transforms them with the shared
    W, sums them with that position's coupling coefficients, and squashes.
    Returns capsules ordered position-major: capsule index = p * types_out + t.
    """
    kh, kw = params.kernel
    stride = params.stride
    b = u.data.shape[0]
    types_in, types_out = params.W.shape[0], params.W.shape[1]
    h, w = u.grid
    if u.types != types_in:
        raise ValueError(f"input has {u.types} capsule types, W expects {types_in}")
    if kh > h or kw > w:
        raise ValueError(f"capsule kernel {kh}x{kw} larger than grid {h}x{w}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if params.c.shape[0] != oh * ow:
        raise ValueError(f"c has {params.c.shape[0]} positions, geometry gives {oh * ow}")

    caps_rank = len(u.capsule_shape)
    num_children = kh * kw * types_in
    # One shared-W copy per window slot; summing its gradient over slots is
    # exactly the weight-sharing backward rule.
    w_tiled = engine.tile_leading(params.W, kh * kw)
    w_flat = engine.reshape(w_tiled, (num_children,) + tuple(params.W.shape[1:]))
    c_eff = _effective_coupling(params.c, coupling_softmax)

    per_position = []
    for p in range(oh * ow):
        orow, ocol = divmod(p, ow)
        win = engine.narrow(u.data, 2, orow * stride, kh)
        win = engine.narrow(win, 3, ocol * stride, kw)      # (B, T, kh, kw, *caps)
        axes = (0, 2, 3, 1) + tuple(range(4, 4 + caps_rank))
        win = engine.permute(win, axes)                      # (B, kh, kw, T, *caps)
        win = engine.reshape(win, (b, num_children) + u.capsule_shape)
        child = CapsuleTensor(win, u.capsule_shape)
        pred = capsule_transform(child, w_flat)
        c_p = engine.reshape(engine.narrow(c_eff, 0, p, 1), (num_children, types_out))
        per_position.append(coupled_sum(pred, c_p))          # (B, J, m_pre, d_out)

    stacked = engine.stack0(per_position)                    # (P, B, J, m_pre, d_out)
    stacked = engine.permute(stacked, (1, 0, 2, 3, 4))
    out_shape = u.capsule_shape[:-1] + params.out_shape
    v = engine.reshape(stacked, (b, oh * ow * types_out) + out_shape)
    return squash(CapsuleTensor(v, out_shape), variant)
