"""Four-stage pyramid transformer encoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .config import ConfigError, EncoderConfig
from .nn import Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def __iter__(self):
        return iter((self.f1, self.f2, self.f3, self.f4))

    def shapes(self) -> list:
        return [f.shape for f in self]


class Attention(Module):
    """Multi-head self-attention over ``[N, C]`` tokens.

    With ``sr_ratio > 1`` keys and values come from a strided-conv reduction
    of the token grid; ``sr_ratio == 1`` is exact full attention.
    """

    def __init__(self, dim: int, heads: int, sr_ratio: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, sr_ratio, rng, stride=sr_ratio)
            self.sr_norm = LayerNorm(dim)
        self.dim, self.heads, self.sr_ratio = dim, heads, sr_ratio

    def forward(self, x: Tensor, h: Optional[int] = None, w: Optional[int] = None) -> Tensor:
        n, c = x.shape
        nh, d = self.heads, c // self.heads
        src = x
        if self.sr_ratio > 1:
            if h is None or w is None or h * w != n:
                raise ValueError("spatial reduction needs the token grid size (h, w)")
            if h % self.sr_ratio or w % self.sr_ratio:
                raise ConfigError(f"token grid {h}x{w} not divisible by sr_ratio {self.sr_ratio}")
            src = self.sr_norm(ops.map_to_tokens(self.sr(ops.tokens_to_map(x, h, w))))
        m = src.shape[0]
        q = self.q(x).reshape(n, nh, d).transpose(1, 0, 2)  # heads, N, d
        k = self.k(src).reshape(m, nh, d).transpose(1, 2, 0)  # heads, d, M
        v = self.v(src).reshape(m, nh, d).transpose(1, 0, 2)  # heads, M, d
        attn = ops.softmax(ops.matmul(q, k) * (1.0 / math.sqrt(d)), axis=-1)
        out = ops.matmul(attn, v).transpose(1, 0, 2).reshape(n, c)
        return self.proj(out)


class DWFeedForward(Module):
    """linear -> depthwise 3x3 on the token grid -> GELU -> linear."""

    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        hidden = dim * expansion
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = DepthwiseConv2d(hidden, 3, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor, h: Optional[int] = None, w: Optional[int] = None) -> Tensor:
        if h is None or w is None or h * w != x.shape[0]:
            raise ValueError(f"feed-forward needs the token grid size, got h={h} w={w} for {x.shape[0]} tokens")
        y = self.fc1(x)
        y = ops.map_to_tokens(self.dwconv(ops.tokens_to_map(y, h, w)))
        return self.fc2(ops.gelu(y))


class Block(Module):
    """Pre-norm transformer block: attention then depthwise feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, sr_ratio: int, expansion: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, sr_ratio, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = DWFeedForward(dim, expansion, rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn(self.norm2(x), h, w)


class OverlapPatchEmbed(Module):
    """Strided conv, channel layer-norm and a learned absolute position embedding.

    The position table is sized for ``base_hw`` and bilinearly resampled (with
    a warning) when the token grid differs.
    """

    def __init__(self, cin: int, cout: int, kernel: int, stride: int, pad: int,
                 base_hw: tuple, rng: np.random.Generator):
        self.proj = Conv2d(cin, cout, kernel, rng, stride=stride, pad=pad)
        self.norm = LayerNorm(cout)
        self.pos_embed = Parameter(trunc_normal(rng, (base_hw[0] * base_hw[1], cout)))
        self.base_hw = tuple(base_hw)
        self.stride = stride

    def forward(self, x: Tensor) -> tuple:
        _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise ConfigError(f"input {h}x{w} not divisible by patch stride {self.stride}")
        tokens_map = self.proj(x)
        c, th, tw = tokens_map.shape
        tokens = self.norm(ops.map_to_tokens(tokens_map))
        return tokens + self._position(th, tw, c), th, tw

    def _position(self, h: int, w: int, c: int) -> Tensor:
        if (h, w) == self.base_hw:
            return self.pos_embed
        _warn_resize(self.base_hw, (h, w))
        grid = ops.tokens_to_map(self.pos_embed, *self.base_hw)
        return ops.map_to_tokens(ops.bilinear_resize(grid, h, w))


_warned: set = set()


def _warn_resize(base, target) -> None:
    key = (base, target)
    if key not in _warned:
        _warned.add(key)
        log.warning("position embedding resized from %sx%s to %sx%s", *base, *target)


class Stage(Module):
    def __init__(self, cin: int, cout: int, depth: int, heads: int, sr_ratio: int, expansion: int,
                 patch: tuple, base_hw: tuple, rng: np.random.Generator):
        kernel, stride, pad = patch
        self.patch_embed = OverlapPatchEmbed(cin, cout, kernel, stride, pad, base_hw, rng)
        self.blocks = [Block(cout, heads, sr_ratio, expansion, rng) for _ in range(depth)]
        self.norm = LayerNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        tokens, h, w = self.patch_embed(x)
        for blk in self.blocks:
            tokens = blk(tokens, h, w)
        return ops.tokens_to_map(self.norm(tokens), h, w)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        bh, bw = cfg.base_resolution
        cin = cfg.in_channels
        self.stages = []
        for i in range(4):
            patch = cfg.first_patch if i == 0 else cfg.later_patch
            stride = cfg.strides[i]
            self.stages.append(Stage(
                cin, cfg.stage_channels[i], cfg.stage_depths[i], cfg.heads[i], cfg.sr_ratios[i],
                cfg.ffn_expansion[i], patch, (bh // stride, bw // stride), rng,
            ))
            cin = cfg.stage_channels[i]

    def forward(self, image: Tensor) -> FeaturePyramid:
        check_input(image, self.cfg.in_channels)
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)


def check_input(image: Tensor, channels: int = 3) -> None:
    if image.ndim != 3 or image.shape[0] != channels:
        raise ConfigError(f"expected a [{channels},H,W] image, got {image.shape}")
    _, h, w = image.shape
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ConfigError(f"image size {h}x{w} must be a positive multiple of 32; pad or crop the input to the next multiple of 32")
