"""Neural-network operators and the attention/neck building blocks.

Primitive layers (conv2d, group_norm, relu, pooling, upsampling, sigmoid,
channel_scale) are registered on the tape with hand-derived backward rules;
the larger blocks (channel/self attention, SPPF, C3K2, C2PSA) are composed
from those primitives so their gradients come for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor,
    apply_op,
    bmm,
    concat,
    ew,
    permute,
    reduce,
    register_op,
    reshape,
    slice_tensor,
    softmax,
)


# --- parameter containers ---------------------------------------------------


@dataclass
class ConvParams:
    """Square-kernel conv weights; padding is fixed at k//2 ("same" for stride 1)."""

    weight: Tensor  # [C_out, C_in, k, k]
    bias: Tensor  # [C_out]
    stride: int = 1

    def __post_init__(self):
        co, ci, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"conv kernel must be square 1x1 or 3x3, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {self.stride}")
        if self.bias.shape != (co,):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match C_out={co}")

    @property
    def padding(self) -> int:
        return self.weight.shape[2] // 2


@dataclass
class GroupNormParams:
    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    groups: int
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.beta.shape != (c,):
            raise ShapeError("group norm gamma/beta length mismatch")
        if self.groups < 1 or c % self.groups != 0:
            raise ShapeError(f"channels {c} not divisible by groups {self.groups}")


@dataclass
class ChannelAttentionParams:
    """Squeeze-and-excitation gate: pool -> reduce conv -> ReLU -> expand conv -> sigmoid."""

    reduce: ConvParams  # 1x1, C -> C/ratio
    expand: ConvParams  # 1x1, C/ratio -> C
    ratio: int = 4


@dataclass
class SelfAttentionParams:
    """Single-head non-local attention with a zero-initialized residual gain."""

    query: ConvParams  # 1x1, C -> max(1, C//8)
    key: ConvParams  # 1x1, C -> max(1, C//8)
    value: ConvParams  # 1x1, C -> C
    gain: Tensor  # scalar, init 0


@dataclass
class SppfParams:
    pre: ConvParams  # 1x1, C -> C/2
    post: ConvParams  # 1x1, 2C -> C
    pool_k: int = 5


@dataclass
class BottleneckParams:
    conv1: ConvParams  # 3x3
    gn1: GroupNormParams
    conv2: ConvParams  # 3x3
    gn2: GroupNormParams


@dataclass
class C3k2Params:
    pre: ConvParams  # 1x1, C_in -> C_out
    bottlenecks: list[BottleneckParams]  # two, on the second half
    post: ConvParams  # 1x1, 1.5*C_out -> C_out


@dataclass
class C2psaParams:
    pre: ConvParams  # 1x1, C -> C
    attn: SelfAttentionParams  # on C/2
    post: ConvParams  # 1x1, C -> C


# --- registered primitive operators ------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, k, k, Ho, Wo] strided view, flattened to [N, C*k*k, Ho*Wo].
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return win.reshape(n, c * k * k, ho * wo)


def _col2im_add(gcols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = xp_shape
    gxp = np.zeros(xp_shape, dtype=np.float64)
    g6 = gcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]
    return gxp


@register_op("conv2d")
def _op_conv2d(x, w, b, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: spatial {h}x{wd} smaller than kernel {kh} after padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, stride, ho, wo)  # [N, Cin*k*k, Ho*Wo]
    wmat = w.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo) + b.reshape(1, cout, 1, 1)

    def bw(g):
        gmat = g.reshape(n, cout, ho * wo)
        gb = g.sum(axis=(0, 2, 3))
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat)
        gxp = _col2im_add(gcols, xp.shape, kh, stride, ho, wo)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return np.ascontiguousarray(gx), gw, gb

    return out, bw


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    return apply_op("conv2d", (x, p.weight, p.bias), stride=p.stride, padding=p.padding)


@register_op("group_norm")
def _op_group_norm(x, gamma, beta, groups=1, eps=1e-5):
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: channels {c} not divisible by groups {groups}")
    xg = x.reshape(n, groups, c // groups, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gh = (g * gamma.reshape(1, c, 1, 1)).reshape(n, groups, c // groups, h, w)
        # d/dx of (x-mu)/std with mu/std functions of the group.
        mean_gh = gh.mean(axis=(2, 3, 4), keepdims=True)
        mean_gh_xhat = (gh * xhat_g).mean(axis=(2, 3, 4), keepdims=True)
        gx = (inv * (gh - mean_gh - xhat_g * mean_gh_xhat)).reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return out, bw


def group_norm(x: Tensor, p: GroupNormParams) -> Tensor:
    return apply_op("group_norm", (x, p.gamma, p.beta), groups=p.groups, eps=p.eps)


@register_op("relu")
def _op_relu(x):
    out = np.maximum(x, 0.0)
    mask = x > 0.0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return out, bw


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", (x,))


@register_op("sigmoid")
def _op_sigmoid(x):
    out = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return out, bw


def sigmoid(x: Tensor) -> Tensor:
    return apply_op("sigmoid", (x,))


@register_op("max_pool2d")
def _op_max_pool2d(x, k=5, stride=1, pad=2):
    if k % 2 != 1:
        raise ShapeError(f"max_pool2d: kernel must be odd, got {k}")
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)  # first maximal index in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        g6 = gflat.reshape(n, c, ho, wo, k, k)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, :, :, i, j]
        return (np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w]),)

    return out, bw


def max_pool2d(x: Tensor, k: int = 5, stride: int = 1, pad: int | None = None) -> Tensor:
    if pad is None:
        pad = k // 2
    return apply_op("max_pool2d", (x,), k=k, stride=stride, pad=pad)


@register_op("upsample_nearest")
def _op_upsample_nearest(x, factor=2):
    if factor not in (2, 8):
        raise ShapeError(f"upsample_nearest: factor must be 2 or 8, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return out, bw


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    return apply_op("upsample_nearest", (x,), factor=factor)


@register_op("channel_scale")
def _op_channel_scale(x, gate):
    n, c, h, w = x.shape
    if gate.shape != (n, c, 1, 1):
        raise ShapeError(f"channel_scale: gate shape {gate.shape} must be {(n, c, 1, 1)}")
    out = x * gate

    def bw(g):
        return g * gate, (g * x).sum(axis=(2, 3), keepdims=True)

    return out, bw


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    return apply_op("channel_scale", (x, gate))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the class/channel axis of an [N,K,H,W] tensor."""
    return softmax(x, axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    return reduce(x, axes=(2, 3), mode="mean", keepdims=True)


# --- composed blocks ----------------------------------------------------------


def channel_attention(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Scale each channel by a sigmoid gate computed from its global average."""
    c = x.shape[1]
    if c < p.ratio:
        raise ShapeError(f"channel_attention: {c} channels < reduction ratio {p.ratio}")
    gate = global_avg_pool(x)
    gate = relu(conv2d(gate, p.reduce))
    gate = sigmoid(conv2d(gate, p.expand))
    return channel_scale(x, gate)


def self_attention(x: Tensor, p: SelfAttentionParams) -> Tensor:
    """x + gain * attention(x) over all H*W positions (single head)."""
    n, c, h, w = x.shape
    t = h * w
    if t > 4096:
        raise ShapeError(f"self_attention: {t} tokens exceed the 4096 guard")
    cq = p.query.weight.shape[0]
    q = reshape(conv2d(x, p.query), (n, cq, t))
    k = reshape(conv2d(x, p.key), (n, cq, t))
    v = reshape(conv2d(x, p.value), (n, c, t))
    att = bmm(permute(q, (0, 2, 1)), k)  # [N, T, T]
    att = ew("mul", att, 1.0 / math.sqrt(cq))
    att = softmax(att, axis=-1)  # rows sum to 1
    agg = bmm(v, permute(att, (0, 2, 1)))  # weighted values per query position
    agg = reshape(agg, (n, c, h, w))
    return x + ew("mul", agg, p.gain)


def sppf(x: Tensor, p: SppfParams) -> Tensor:
    """Serial 5x5 max pools concatenated (receptive fields 5/9/13), conv back to C."""
    y0 = conv2d(x, p.pre)
    y1 = max_pool2d(y0, k=p.pool_k, stride=1)
    y2 = max_pool2d(y1, k=p.pool_k, stride=1)
    y3 = max_pool2d(y2, k=p.pool_k, stride=1)
    return conv2d(concat([y0, y1, y2, y3], axis=1), p.post)


def _bottleneck(x: Tensor, p: BottleneckParams) -> Tensor:
    y = group_norm(conv2d(x, p.conv1), p.gn1)
    y = relu(y)
    y = group_norm(conv2d(y, p.conv2), p.gn2)
    return x + y


def _split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    n, c, h, w = x.shape
    a = slice_tensor(x, (0, 0, 0, 0), (n, at, h, w))
    b = slice_tensor(x, (0, at, 0, 0), (n, c, h, w))
    return a, b


def c3k2_block(x: Tensor, p: C3k2Params) -> Tensor:
    """CSP-style split: half the channels pass through two residual bottlenecks,
    all stages concatenated and fused by a 1x1 conv."""
    y = conv2d(x, p.pre)
    half = y.shape[1] // 2
    a, b = _split_channels(y, half)
    b1 = _bottleneck(b, p.bottlenecks[0])
    b2 = _bottleneck(b1, p.bottlenecks[1])
    return conv2d(concat([a, b1, b2], axis=1), p.post)


def c2psa_block(x: Tensor, p: C2psaParams) -> Tensor:
    """Partial self-attention: one channel half is refined by attention."""
    y = conv2d(x, p.pre)
    half = y.shape[1] // 2
    a, b = _split_channels(y, half)
    b = self_attention(b, p.attn)
    return conv2d(concat([a, b], axis=1), p.post)
