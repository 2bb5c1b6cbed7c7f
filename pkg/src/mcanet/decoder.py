"""Multi-scale cross-axis attention decoder and the full network.

The decoder fuses the three deepest pyramid levels at stride 4, runs two
parallel branches of multi-scale strip convolutions whose outputs
cross-attend along opposite spatial axes, merges the result with the
stride-4 skip, and emits full-resolution logits. There is deliberately no
activation function anywhere in the decoder. Every ablation variant (strip
scales, attention wiring, residual, skip usage) is selectable through
:class:`AblationFlags`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderSpec, FeaturePyramid, MSCANEncoder
from .errors import ConfigError, ShapeError
from .ops import (
    AttentionParams,
    LayerNormChannel,
    Module,
    attention_params,
    bilinear_resize,
    conv2d,
    conv_params,
    mhca_axis,
)
from .tensor import Tensor, add, concat_channels

__all__ = [
    "AblationFlags",
    "DecoderSpec",
    "MSCBranch",
    "MCADecoder",
    "MCANet",
]

ATTENTION_MODES = ("cross", "parallel_no_cross", "sequential_axial", "none")
E1_MODES = ("skip_concat", "inside_mca", "absent")


@dataclass(frozen=True)
class AblationFlags:
    """Switches selecting the decoder variant; defaults give the full model."""

    multi_scale: bool = True
    attention_mode: str = "cross"
    residual_input: bool = True
    use_e1: str = "skip_concat"

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, "
                              f"got {self.attention_mode!r}")
        if self.use_e1 not in E1_MODES:
            raise ConfigError(f"use_e1 must be one of {E1_MODES}, got {self.use_e1!r}")


@dataclass(frozen=True)
class DecoderSpec:
    """Decoder width, head count, strip scales, and output channels."""

    channels: int
    heads: int
    kernel_sizes: tuple[int, ...] = (7, 11, 21)
    num_classes: int = 1
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"decoder channels={self.channels} not divisible "
                              f"by heads={self.heads}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"strip kernel sizes must be odd, got {self.kernel_sizes}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")


class MSCBranch(Module):
    """One directional branch: norm, parallel depthwise strips summed, 1x1 mix.

    axis="x" uses (1,k) kernels, axis="y" uses (k,1); with multi_scale off
    the strip sum degenerates to an identity path over the normed input.
    """

    def __init__(self, channels: int, kernel_sizes, axis: str,
                 multi_scale: bool, rng: np.random.Generator):
        if axis not in ("x", "y"):
            raise ConfigError(f"axis must be 'x' or 'y', got {axis!r}")
        c = channels
        self.axis = axis
        self.multi_scale = multi_scale
        self.norm = LayerNormChannel(c)
        if multi_scale:
            shape = (lambda k: (1, k)) if axis == "x" else (lambda k: (k, 1))
            self.strips = [conv_params(rng, c, c, shape(k), groups=c) for k in kernel_sizes]
        else:
            self.strips = []
        self.mix = conv_params(rng, c, c, 1, padding=0)

    def forward(self, f: Tensor) -> Tensor:
        a = self.norm(f)
        if self.multi_scale:
            s = conv2d(a, self.strips[0])
            for strip in self.strips[1:]:
                s = add(s, conv2d(a, strip))
        else:
            s = a
        return conv2d(s, self.mix)

    __call__ = forward


class MCADecoder(Module):
    """Pyramid fusion, cross-axis attention, and the prediction head."""

    def __init__(self, enc_channels, spec: DecoderSpec, rng: np.random.Generator):
        self.spec = spec
        flags = spec.ablation
        c = spec.channels
        mode = flags.attention_mode

        fuse_in = sum(enc_channels[1:])
        if flags.use_e1 == "inside_mca":
            fuse_in += enc_channels[0]
        self.reduce = conv_params(rng, fuse_in, c, 1, padding=0)

        if mode in ("cross", "parallel_no_cross", "none"):
            self.branch_x = MSCBranch(c, spec.kernel_sizes, "x", flags.multi_scale, rng)
            self.branch_y = MSCBranch(c, spec.kernel_sizes, "y", flags.multi_scale, rng)
        if mode in ("cross", "parallel_no_cross"):
            self.attn_top = attention_params(rng, c, spec.heads)
            self.attn_bottom = attention_params(rng, c, spec.heads)
        if mode == "sequential_axial":
            self.axial_norm = LayerNormChannel(c)
            self.attn_rows = attention_params(rng, c, spec.heads)
            self.attn_cols = attention_params(rng, c, spec.heads)
            self.out_single = conv_params(rng, c, c, 1, padding=0)
        else:
            self.out_top = conv_params(rng, c, c, 1, padding=0)
            self.out_bottom = conv_params(rng, c, c, 1, padding=0)

        head_in = c + (enc_channels[0] if flags.use_e1 == "skip_concat" else 0)
        self.head_merge = conv_params(rng, head_in, c, 1, padding=0)
        self.classify = conv_params(rng, c, spec.num_classes, 1, padding=0)

    def fuse_pyramid(self, p: FeaturePyramid) -> Tensor:
        """Resize E2..E4 (and optionally E1) to E1's grid, concat, reduce."""
        th, tw = p.e1.shape[2], p.e1.shape[3]
        ups = [bilinear_resize(e, th, tw) for e in (p.e2, p.e3, p.e4)]
        if self.spec.ablation.use_e1 == "inside_mca":
            ups = [p.e1] + ups
        return conv2d(concat_channels(ups), self.reduce)

    def mca_forward(self, f: Tensor) -> Tensor:
        """Cross-axis attention body, shape preserving."""
        flags = self.spec.ablation
        mode = flags.attention_mode
        if mode == "cross":
            fx = self.branch_x(f)
            fy = self.branch_y(f)
            top = mhca_axis(fy, fx, "columns", self.attn_top)
            bottom = mhca_axis(fx, fy, "rows", self.attn_bottom)
            out = add(conv2d(top, self.out_top), conv2d(bottom, self.out_bottom))
        elif mode == "parallel_no_cross":
            fx = self.branch_x(f)
            fy = self.branch_y(f)
            top = mhca_axis(fx, fx, "columns", self.attn_top)
            bottom = mhca_axis(fy, fy, "rows", self.attn_bottom)
            out = add(conv2d(top, self.out_top), conv2d(bottom, self.out_bottom))
        elif mode == "sequential_axial":
            a = self.axial_norm(f)
            a = mhca_axis(a, a, "rows", self.attn_rows)
            a = mhca_axis(a, a, "columns", self.attn_cols)
            out = conv2d(a, self.out_single)
        else:  # attention disabled
            fx = self.branch_x(f)
            fy = self.branch_y(f)
            out = add(conv2d(fx, self.out_top), conv2d(fy, self.out_bottom))
        if flags.residual_input:
            out = add(out, f)
        return out

    def decode_head(self, f_out: Tensor, e1: Tensor, out_h: int, out_w: int) -> Tensor:
        """Merge with the stride-4 skip and emit full-resolution logits."""
        if self.spec.ablation.use_e1 == "skip_concat":
            if f_out.shape[2:] != e1.shape[2:]:
                raise ShapeError(f"skip/feature spatial mismatch: "
                                 f"{e1.shape} vs {f_out.shape}")
            x = concat_channels([f_out, e1])
        else:
            x = f_out
        x = conv2d(x, self.head_merge)
        x = conv2d(x, self.classify)
        return bilinear_resize(x, out_h, out_w)

    def forward(self, p: FeaturePyramid, out_h: int, out_w: int) -> Tensor:
        f = self.fuse_pyramid(p)
        f_out = self.mca_forward(f)
        return self.decode_head(f_out, p.e1, out_h, out_w)

    __call__ = forward


class MCANet(Module):
    """Encoder plus cross-axis attention decoder; logits match input size."""

    def __init__(self, enc_spec: EncoderSpec, dec_spec: DecoderSpec, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.encoder = MSCANEncoder(enc_spec, rng)
        self.decoder = MCADecoder(enc_spec.channels, dec_spec, rng)

    def forward(self, img: Tensor) -> Tensor:
        pyramid = self.encoder(img)
        return self.decoder(pyramid, img.shape[2], img.shape[3])

    __call__ = forward

    @property
    def num_classes(self) -> int:
        return self.decoder.spec.num_classes

    @property
    def in_channels(self) -> int:
        return self.encoder.spec.in_channels

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, table: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(table))
        extra = sorted(set(table) - set(own))
        if missing or extra:
            raise ShapeError(f"parameter names do not match: missing={missing[:3]} "
                             f"extra={extra[:3]}")
        for name, p in own.items():
            incoming = np.asarray(table[name])
            if incoming.shape != p.shape:
                raise ShapeError(f"shape mismatch for {name}: "
                                 f"{incoming.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(incoming.astype(p.data.dtype))
