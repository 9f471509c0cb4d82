"""Transformer Parsing Module decoder, segmentation heads and the dual-head model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ops
from .config import ConfigError, ModelConfig, TpmConfig
from .encoder import Attention, Encoder, FeaturePyramid, check_input
from .nn import Conv2d, LayerNorm, Linear, Module
from .ops import DimensionError
from .tensor import Tensor, no_grad


@dataclass
class DualSegmentation:
    general_logits: Tensor
    trans_logits: Optional[Tensor]

    def argmax(self) -> tuple:
        g = self.general_logits.data.argmax(axis=0)
        t = self.trans_logits.data.argmax(axis=0) if self.trans_logits is not None else None
        return g, t


class TPM(Module):
    """Project a pyramid level to ``C`` channels, attend, resize to H/4 x W/4."""

    def __init__(self, in_channels: int, cfg: TpmConfig, sr_ratio: int, rng: np.random.Generator):
        self.proj = Linear(in_channels, cfg.embed_dim, rng)
        self.norm = LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg.embed_dim, cfg.heads, sr_ratio, rng)

    def forward(self, f: Tensor, h4: int, w4: int) -> Tensor:
        _, h, w = f.shape
        if h > h4 or w > w4:
            raise ValueError(f"TPM target {h4}x{w4} is smaller than source {h}x{w}")
        t = self.proj(ops.map_to_tokens(f))
        t = t + self.attn(self.norm(t), h, w)
        return ops.bilinear_resize(ops.tokens_to_map(t, h, w), h4, w4)


def fuse_pyramid(maps: Sequence[Tensor], mode: str = "sum") -> Tensor:
    if len(maps) != 4:
        raise DimensionError(f"fuse_pyramid expects 4 maps, got {len(maps)}")
    for m in maps[1:]:
        if m.shape != maps[0].shape:
            raise DimensionError(f"fuse_pyramid: shapes {maps[0].shape} and {m.shape} differ")
    if mode == "sum":
        out = maps[0]
        for m in maps[1:]:
            out = out + m
        return out
    if mode == "concat":
        return ops.concat(list(maps), axis=0)
    raise ConfigError(f"unknown fusion mode {mode!r}")


class SegHead(Module):
    """1x1 classifier on the fused H/4 map, then x4 bilinear upsampling."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator):
        self.classifier = Conv2d(in_channels, num_classes, 1, rng)
        self.num_classes = num_classes

    def forward(self, fused: Tensor, h: int, w: int) -> Tensor:
        _, fh, fw = fused.shape
        if (h, w) != (4 * fh, 4 * fw):
            raise ValueError(f"output {h}x{w} must be 4x the fused map {fh}x{fw}")
        return ops.bilinear_resize(self.classifier(fused), h, w)


class Decoder(Module):
    """One TPM per pyramid level, fusion, and a segmentation head."""

    def __init__(self, stage_channels: Sequence[int], cfg: TpmConfig, num_classes: int, rng: np.random.Generator):
        self.cfg = cfg
        self.tpms = [TPM(c, cfg, sr, rng) for c, sr in zip(stage_channels, cfg.sr_ratios)]
        fused = cfg.embed_dim * (4 if cfg.fusion_mode == "concat" else 1)
        self.head = SegHead(fused, num_classes, rng)

    def stage_maps(self, pyramid: FeaturePyramid) -> list:
        _, h4, w4 = pyramid.f1.shape
        return [tpm(f, h4, w4) for tpm, f in zip(self.tpms, pyramid)]

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        _, h4, w4 = pyramid.f1.shape
        fused = fuse_pyramid(self.stage_maps(pyramid), self.cfg.fusion_mode)
        return self.head(fused, 4 * h4, 4 * w4)


class Trans4Trans(Module):
    """Shared pyramid encoder with a general-scene head and an optional transparency head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, rng)
        channels = cfg.encoder.stage_channels
        self.general = Decoder(channels, cfg.tpm, cfg.general_classes, rng)
        self.trans = Decoder(channels, cfg.tpm, cfg.trans_classes, rng) if cfg.dual_head else None

    @property
    def decoders(self) -> list:
        return [d for d in (self.general, self.trans) if d is not None]

    def forward(self, image: Tensor) -> DualSegmentation:
        return dual_forward(image, self)

    def forward_head(self, image: Tensor, head: int) -> Tensor:
        """Logits of one head only; the other decoder is not evaluated."""
        pyramid = self.encoder(image)
        return self.decoders[head](pyramid)


def dual_forward(image: Tensor, model: Trans4Trans) -> DualSegmentation:
    check_input(image, model.cfg.encoder.in_channels)
    pyramid = model.encoder(image)
    general = model.general(pyramid)
    trans = model.trans(pyramid) if model.trans is not None else None
    return DualSegmentation(general, trans)


def channel_mean_to_gray(fmap: np.ndarray) -> np.ndarray:
    """Channel-mean activation, min-max scaled to uint8; a flat map becomes 128."""
    m = np.asarray(fmap, dtype=np.float64).mean(axis=0)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_feature_maps(image: Tensor, model: Trans4Trans, out_dir) -> list:
    """Write one grayscale PGM per decoder stage and head; returns the paths."""
    from .netpbm import write_pgm

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create feature-map directory {out}: {exc}") from exc
    check_input(image, model.cfg.encoder.in_channels)
    paths = []
    with no_grad():
        pyramid = model.encoder(image)
        for head_idx, dec in enumerate(model.decoders, start=1):
            for stage_idx, fmap in enumerate(dec.stage_maps(pyramid), start=1):
                path = out / f"head{head_idx}_stage{stage_idx}.pgm"
                write_pgm(path, channel_mean_to_gray(fmap.data))
                paths.append(path)
    return paths
