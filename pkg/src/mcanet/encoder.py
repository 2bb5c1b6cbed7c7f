"""Hierarchical multi-scale convolutional-attention encoder.

Four stages produce a feature pyramid at strides 4/8/16/32. The stem is two
3x3 stride-2 convolutions; each later stage opens with one 3x3 stride-2
convolution. Stage bodies are shape-preserving blocks built from a gated
large-kernel depthwise mix (5x5 base plus 7/11/21 strip pairs) and a
convolutional feed-forward sub-layer. Channel layer norm keeps everything
independent of batch composition; the only activation lives in the
feed-forward sub-layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import ConvParams, LayerNormChannel, Module, conv2d, conv_params
from .tensor import Tensor, add, gelu, mul

__all__ = ["EncoderSpec", "FeaturePyramid", "MSCABlock", "MSCANEncoder"]

STRIP_KERNELS = (7, 11, 21)


@dataclass(frozen=True)
class EncoderSpec:
    """Channel widths and block counts of the four stages."""

    channels: tuple[int, int, int, int]
    blocks: tuple[int, int, int, int]
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ConfigError("encoder spec needs 4 channel widths and 4 block counts")
        if any(b < 1 for b in self.blocks):
            raise ConfigError(f"block counts must be >= 1, got {self.blocks}")
        if list(self.channels) != sorted(set(self.channels)):
            raise ConfigError(f"channel widths must strictly increase, got {self.channels}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")


class FeaturePyramid(NamedTuple):
    """Stage outputs at strides 4, 8, 16, 32."""

    e1: Tensor
    e2: Tensor
    e3: Tensor
    e4: Tensor

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(e.shape[1] for e in self)


class MSCABlock(Module):
    """Shape-preserving block: gated multi-scale depthwise attention followed
    by a 4x-expansion convolutional feed-forward, both with residuals."""

    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.norm1 = LayerNormChannel(c)
        self.base5 = conv_params(rng, c, c, 5, groups=c)
        self.strips = [
            (conv_params(rng, c, c, (1, k), groups=c),
             conv_params(rng, c, c, (k, 1), groups=c))
            for k in STRIP_KERNELS
        ]
        self.gate = conv_params(rng, c, c, 1, padding=0)
        self.norm2 = LayerNormChannel(c)
        self.expand = conv_params(rng, c, 4 * c, 1, padding=0)
        self.dw3 = conv_params(rng, 4 * c, 4 * c, 3, groups=4 * c)
        self.contract = conv_params(rng, 4 * c, c, 1, padding=0)

    def forward(self, x: Tensor) -> Tensor:
        u = conv2d(self.norm1(x), self.base5)
        s = u
        for row, col in self.strips:
            s = add(s, conv2d(conv2d(u, row), col))
        x = add(x, mul(conv2d(s, self.gate), x))
        f = conv2d(self.norm2(x), self.expand)
        f = gelu(conv2d(f, self.dw3))
        return add(x, conv2d(f, self.contract))

    __call__ = forward


class MSCANEncoder(Module):
    """Four-stage encoder returning the stride-4/8/16/32 pyramid."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        self.spec = spec
        c0 = spec.channels[0]
        mid = max(c0 // 2, 1)
        self.stem1 = conv_params(rng, spec.in_channels, mid, 3, stride=2)
        self.stem1_norm = LayerNormChannel(mid)
        self.stem2 = conv_params(rng, mid, c0, 3, stride=2)
        self.stem2_norm = LayerNormChannel(c0)
        self.downs = []
        self.down_norms = []
        for i in range(1, 4):
            self.downs.append(conv_params(rng, spec.channels[i - 1], spec.channels[i], 3, stride=2))
            self.down_norms.append(LayerNormChannel(spec.channels[i]))
        self.stages = [
            [MSCABlock(spec.channels[i], rng) for _ in range(spec.blocks[i])]
            for i in range(4)
        ]

    def forward(self, img: Tensor) -> FeaturePyramid:
        if img.ndim != 4:
            raise ShapeError(f"encoder expects NCHW input, got {img.shape}")
        n, c, h, w = img.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"encoder built for {self.spec.in_channels} input channels, got {c}")
        if h % 32 or w % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {h}x{w}")
        x = self.stem1_norm(conv2d(img, self.stem1))
        x = self.stem2_norm(conv2d(x, self.stem2))
        outs = []
        for i in range(4):
            if i > 0:
                x = self.down_norms[i - 1](conv2d(x, self.downs[i - 1]))
            for block in self.stages[i]:
                x = block(x)
            outs.append(x)
        return FeaturePyramid(*outs)

    __call__ = forward
