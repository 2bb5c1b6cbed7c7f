"""Neural building blocks: convolution, channel layer norm, bilinear
resampling, and axis-wise multi-head cross-attention.

All functions run on the autograd tape from :mod:`mcanet.tensor`; parameters
are plain Tensors grouped into small param structs. Strip kernels (1,k)/(k,1)
are ordinary conv2d calls with depthwise grouping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    _count,
    concat_channels,
    matmul,
    record,
    reshape,
    scale,
    softmax_axis,
    transpose,
)

__all__ = [
    "Module",
    "ConvParams",
    "AttentionParams",
    "LayerNormChannel",
    "conv2d",
    "conv_params",
    "attention_params",
    "layer_norm_channel",
    "bilinear_resize",
    "mhca_axis",
    "fan_in_uniform",
]


class Module:
    """Minimal parameter container with recursive, dotted-name discovery.

    Attribute insertion order fixes the parameter order, which keeps
    checkpoints and seeded initialization deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            yield from _walk_params(name, val)

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk_params(name: str, val) -> Iterator[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (ConvParams, AttentionParams)):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_params(f"{name}.{i}", item)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Learnable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    from .tensor import default_dtype

    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(default_dtype())
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights and geometry of one 2-D cross-correlation.

    weight: (C_out, C_in/groups, kH, kW); bias: (C_out,) or None.
    """

    weight: Tensor
    bias: Optional[Tensor]
    stride: tuple[int, int]
    padding: tuple[int, int]
    groups: int

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias


def conv_params(rng: np.random.Generator, c_in: int, c_out: int, kernel,
                stride=1, padding="same", groups: int = 1,
                bias: bool = True) -> ConvParams:
    """Construct fan-in-initialized conv weights with validated geometry."""
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    kh, kw = int(kernel[0]), int(kernel[1])
    if kh < 1 or kw < 1:
        raise ConfigError(f"kernel extents must be positive, got {(kh, kw)}")
    if c_in % groups or c_out % groups:
        raise ConfigError(f"groups={groups} does not divide C_in={c_in}, C_out={c_out}")
    if isinstance(stride, int):
        stride = (stride, stride)
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"'same' padding needs odd kernels, got {(kh, kw)}")
        padding = ((kh - 1) // 2, (kw - 1) // 2)
    elif isinstance(padding, int):
        padding = (padding, padding)
    fan_in = (c_in // groups) * kh * kw
    w = fan_in_uniform(rng, (c_out, c_in // groups, kh, kw), fan_in)
    b = None
    if bias:
        from .tensor import default_dtype

        b = Tensor(np.zeros(c_out, dtype=default_dtype()), requires_grad=True)
    return ConvParams(w, b, (int(stride[0]), int(stride[1])),
                      (int(padding[0]), int(padding[1])), int(groups))


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation (no kernel flip) with stride/padding/groups.

    Gradients are defined for the input, the weight, and the bias.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, c_in, h, w = x.shape
    c_out, cpg, kh, kw = p.weight.shape
    g = p.groups
    if c_in % g or c_out % g:
        raise ConfigError(f"groups={g} does not divide C_in={c_in}/C_out={c_out}")
    if cpg != c_in // g:
        raise ConfigError(f"weight expects {cpg * g} input channels, got {c_in}")
    sh, sw = p.stride
    ph, pw = p.padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}")

    xd, wd = x.data, p.weight.data
    bd = p.bias.data if p.bias is not None else None
    pointwise = kh == kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0) and g == 1
    depthwise = g == c_in and g == c_out

    if pointwise:
        out = np.tensordot(xd, wd[:, :, 0, 0], axes=([1], [1]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        if g == 1:
            out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))
            out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        elif depthwise:
            out = np.einsum("nchwkl,ckl->nchw", win, wd[:, 0], optimize=True)
        else:
            cig, cog = c_in // g, c_out // g
            out = np.empty((n, c_out, ho, wo), dtype=xd.dtype)
            for gi in range(g):
                o = np.tensordot(win[:, gi * cig:(gi + 1) * cig],
                                 wd[gi * cog:(gi + 1) * cog],
                                 axes=([1, 4, 5], [1, 2, 3]))
                out[:, gi * cog:(gi + 1) * cog] = o.transpose(0, 3, 1, 2)
    if bd is not None:
        out = out + bd[None, :, None, None]
    _count("conv", n * c_out * ho * wo * cpg * kh * kw)

    def bwd(grad):
        gx = gw = gb = None
        if bd is not None and p.bias.requires_grad:
            gb = grad.sum(axis=(0, 2, 3))
        if pointwise:
            if p.weight.requires_grad:
                gw = np.tensordot(grad, xd, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if x.requires_grad:
                gx = np.tensordot(grad, wd[:, :, 0, 0], axes=([1], [0]))
                gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        else:
            xp2 = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
            win2 = sliding_window_view(xp2, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
            gcols = None
            if g == 1:
                if p.weight.requires_grad:
                    gw = np.tensordot(grad, win2, axes=([0, 2, 3], [0, 2, 3]))
                if x.requires_grad:
                    gcols = np.tensordot(grad, wd, axes=([1], [0]))
                    gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            elif depthwise:
                if p.weight.requires_grad:
                    gw = np.einsum("nchw,nchwkl->ckl", grad, win2, optimize=True)[:, None]
                if x.requires_grad:
                    gcols = grad[:, :, :, :, None, None] * wd[:, 0][None, :, None, None, :, :]
            else:
                cig, cog = c_in // g, c_out // g
                if p.weight.requires_grad:
                    gw = np.empty_like(wd)
                if x.requires_grad:
                    gcols = np.empty((n, c_in, ho, wo, kh, kw), dtype=xd.dtype)
                for gi in range(g):
                    gs = grad[:, gi * cog:(gi + 1) * cog]
                    ws = wd[gi * cog:(gi + 1) * cog]
                    if gw is not None:
                        gw[gi * cog:(gi + 1) * cog] = np.tensordot(
                            gs, win2[:, gi * cig:(gi + 1) * cig], axes=([0, 2, 3], [0, 2, 3]))
                    if gcols is not None:
                        gc = np.tensordot(gs, ws, axes=([1], [0]))
                        gcols[:, gi * cig:(gi + 1) * cig] = gc.transpose(0, 3, 1, 2, 4, 5)
            if gcols is not None:
                gxp = np.zeros((n, c_in, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[..., i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
                gx = np.ascontiguousarray(gx)
        if p.bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return record("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# normalization


def layer_norm_channel(x: Tensor, gamma: Tensor, beta: Tensor,
                       eps: float = 1e-6) -> Tensor:
    """Normalize the channel vector at every (n, h, w) location, then apply
    the per-channel affine transform."""
    if x.ndim != 4:
        raise ShapeError(f"layer_norm_channel expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must be per-channel vectors")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    _count("norm", 8 * xd.size)

    def bwd(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, gg, gb

    return record("layer_norm", (x, gamma, beta), out, bwd)


class LayerNormChannel(Module):
    """Channel layer norm with learnable scale/shift."""

    def __init__(self, channels: int, eps: float = 1e-6):
        from .tensor import default_dtype

        dt = default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm_channel(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------------------
# resampling


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-center bilinear resampling to (out_h, out_w).

    Source coordinate s = (d + 0.5) * in/out - 0.5, clamped to [0, in-1];
    an identical output size is the exact identity.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {(out_h, out_w)}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = x.data.copy()

        def bwd_id(g):
            return (g,)

        _count("resize", out.size)
        return record("bilinear_resize", (x,), out, bwd_id)

    def axis_coords(out_n, in_n):
        s = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
        s = np.clip(s, 0.0, in_n - 1)
        i0 = np.floor(s).astype(np.int64)
        frac = s - i0
        i1 = np.minimum(i0 + 1, in_n - 1)
        return i0, i1, frac

    r0, r1, fr = axis_coords(out_h, h)
    c0, c1, fc = axis_coords(out_w, w)
    dt = x.data.dtype
    fr = fr.astype(dt)[:, None]
    fc = fc.astype(dt)[None, :]
    xd = x.data
    top = (1 - fc) * xd[:, :, r0[:, None], c0[None, :]] + fc * xd[:, :, r0[:, None], c1[None, :]]
    bot = (1 - fc) * xd[:, :, r1[:, None], c0[None, :]] + fc * xd[:, :, r1[:, None], c1[None, :]]
    out = (1 - fr) * top + fr * bot
    _count("resize", 8 * out.size)

    def bwd(g):
        gx = np.zeros((n, c, h * w), dtype=dt)
        corners = (
            (r0, c0, (1 - fr) * (1 - fc)),
            (r0, c1, (1 - fr) * fc),
            (r1, c0, fr * (1 - fc)),
            (r1, c1, fr * fc),
        )
        for ri, ci, wgt in corners:
            flat = (ri[:, None] * w + ci[None, :]).reshape(-1)
            vals = (g * wgt).reshape(n, c, -1)
            np.add.at(gx, (slice(None), slice(None), flat), vals)
        return (gx.reshape(n, c, h, w),)

    return record("bilinear_resize", (x,), np.ascontiguousarray(out), bwd)


# ---------------------------------------------------------------------------
# axis-wise multi-head cross-attention


@dataclass
class AttentionParams:
    """Head count plus the four 1x1 projections of one attention layer."""

    heads: int
    proj_q: ConvParams
    proj_k: ConvParams
    proj_v: ConvParams
    proj_o: ConvParams

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in ("proj_q", "proj_k", "proj_v", "proj_o"):
            yield from getattr(self, name).named_parameters(prefix=f"{prefix}{name}.")


def attention_params(rng: np.random.Generator, channels: int, heads: int) -> AttentionParams:
    if channels % heads:
        raise ConfigError(f"channels={channels} not divisible by heads={heads}")
    mk = lambda bias: conv_params(rng, channels, channels, 1, padding=0, bias=bias)
    return AttentionParams(heads, mk(False), mk(False), mk(False), mk(True))


def mhca_axis(q_src: Tensor, kv_src: Tensor, axis: str, ap: AttentionParams) -> Tensor:
    """Multi-head attention along one spatial axis.

    axis="columns": every (sample, head, column) is an independent sequence
    of H tokens; axis="rows": sequences are the W tokens of each row. Queries
    come from q_src, keys and values from kv_src; scores use 1/sqrt(d)
    scaling with softmax over the key tokens, per head.
    """
    if q_src.shape != kv_src.shape:
        raise ShapeError(f"query/key-value shapes differ: {q_src.shape} vs {kv_src.shape}")
    if q_src.ndim != 4:
        raise ShapeError("mhca_axis expects NCHW tensors")
    if axis not in ("columns", "rows"):
        raise ConfigError(f"axis must be 'columns' or 'rows', got {axis!r}")
    n, c, h, w = q_src.shape
    heads = ap.heads
    if c % heads:
        raise ConfigError(f"channels={c} not divisible by heads={heads}")
    d = c // heads

    q = conv2d(q_src, ap.proj_q)
    k = conv2d(kv_src, ap.proj_k)
    v = conv2d(kv_src, ap.proj_v)

    # (N,C,H,W) -> (N,heads,other,tokens,d)
    perm = (0, 1, 4, 3, 2) if axis == "columns" else (0, 1, 3, 4, 2)
    inv_perm = tuple(np.argsort(perm))

    def split(t):
        return transpose(reshape(t, (n, heads, d, h, w)), perm)

    qs, ks, vs = split(q), split(k), split(v)
    scores = scale(matmul(qs, transpose(ks, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(d))
    weights = softmax_axis(scores, -1)
    mixed = matmul(weights, vs)
    merged = reshape(transpose(mixed, inv_perm), (n, c, h, w))
    return conv2d(merged, ap.proj_o)
