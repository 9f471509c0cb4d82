"""Parameter / MAC accounting and latency measurement.

Costs are derived from closed-form per-layer formulas over a
:class:`~t4t.config.ModelConfig`, independently of the stored tensors:

* conv:       Cout * Cin * kh * kw * H' * W'
* depthwise:  C * kh * kw * H' * W'
* linear:     in * out * positions
* attention:  2 * N * M * C   (Q K^T and A V, M = keys after spatial reduction)

Softmax, normalisation, activations, bias adds and resizes are not counted.
``gflops`` is ``2 * macs / 1e9``. ``gmacs`` is ``macs / 1e9``, the unit most
published segmentation cost tables call "GFLOPs".
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ConfigError, ModelConfig


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    samples: list = field(default_factory=list)


@dataclass
class CostReport:
    height: int
    width: int
    layers: list
    latency: Optional[LatencyStats] = None

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def gflops(self) -> float:
        return 2.0 * self.macs / 1e9

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    @property
    def mparams(self) -> float:
        return self.params / 1e6

    def group(self, prefix: str) -> tuple:
        """(params, macs) summed over layers whose name starts with ``prefix``."""
        sel = [l for l in self.layers if l.name == prefix or l.name.startswith(prefix + ".")]
        return sum(l.params for l in sel), sum(l.macs for l in sel)

    def render_text(self, per_layer: bool = False) -> str:
        lines = [
            f"# cost @ {self.height}x{self.width}; 1 MAC = 1 multiply + 1 add; "
            f"GFLOPs = 2*MACs/1e9; GMACs = MACs/1e9",
            f"{'MParams':>10} {'GMACs':>10} {'GFLOPs':>10}",
            f"{self.mparams:>10.3f} {self.gmacs:>10.3f} {self.gflops:>10.3f}",
        ]
        if self.latency is not None:
            lines.append(f"latency_ms {self.latency.mean_ms:.2f} ± {self.latency.std_ms:.2f} "
                         f"(n={len(self.latency.samples)})")
        if per_layer:
            width = max(len(l.name) for l in self.layers)
            lines.append(f"{'layer':<{width}} {'params':>12} {'macs':>16}")
            for l in self.layers:
                lines.append(f"{l.name:<{width}} {l.params:>12d} {l.macs:>16d}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self, per_layer: bool = True) -> str:
        rows = [{
            "record": "total", "height": self.height, "width": self.width,
            "params": self.params, "macs": self.macs, "gflops": self.gflops, "gmacs": self.gmacs,
            "convention": "gflops=2*macs/1e9",
        }]
        if self.latency is not None:
            rows[0]["latency_mean_ms"] = self.latency.mean_ms
            rows[0]["latency_std_ms"] = self.latency.std_ms
        if per_layer:
            rows += [{"record": "layer", "name": l.name, "params": l.params, "macs": l.macs} for l in self.layers]
        return "".join(json.dumps(r) + "\n" for r in rows)


# -- closed-form layer costs -------------------------------------------------------

def _linear(name, n_in, n_out, positions):
    return LayerCost(name, n_in * n_out + n_out, n_in * n_out * positions)


def _conv(name, cin, cout, k, ho, wo):
    return LayerCost(name, cout * cin * k * k + cout, cout * cin * k * k * ho * wo)


def _norm(name, c):
    return LayerCost(name, 2 * c, 0)


def _attention(prefix, c, sr, h, w):
    n = h * w
    out = [_linear(f"{prefix}.q", c, c, n)]
    m = n
    if sr > 1:
        hs, ws = h // sr, w // sr
        m = hs * ws
        out.append(_conv(f"{prefix}.sr", c, c, sr, hs, ws))
        out.append(_norm(f"{prefix}.sr_norm", c))
    out.append(_linear(f"{prefix}.k", c, c, m))
    out.append(_linear(f"{prefix}.v", c, c, m))
    out.append(LayerCost(f"{prefix}.core", 0, 2 * n * m * c))
    out.append(_linear(f"{prefix}.proj", c, c, n))
    return out


def _check_hw(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"cost accounting needs H, W divisible by 32, got {h}x{w}")


def encoder_costs(cfg: ModelConfig, h: int, w: int) -> list:
    enc = cfg.encoder
    layers = []
    cin = enc.in_channels
    bh, bw = enc.base_resolution
    for i in range(4):
        s = enc.strides[i]
        c = enc.stage_channels[i]
        hs, ws = h // s, w // s
        k = (enc.first_patch if i == 0 else enc.later_patch)[0]
        p = f"encoder.stages.{i}"
        layers.append(_conv(f"{p}.patch_embed.proj", cin, c, k, hs, ws))
        layers.append(_norm(f"{p}.patch_embed.norm", c))
        layers.append(LayerCost(f"{p}.patch_embed.pos_embed", (bh // s) * (bw // s) * c, 0))
        hidden = c * enc.ffn_expansion[i]
        for b in range(enc.stage_depths[i]):
            bp = f"{p}.blocks.{b}"
            layers.append(_norm(f"{bp}.norm1", c))
            layers += _attention(f"{bp}.attn", c, enc.sr_ratios[i], hs, ws)
            layers.append(_norm(f"{bp}.norm2", c))
            layers.append(_linear(f"{bp}.ffn.fc1", c, hidden, hs * ws))
            layers.append(LayerCost(f"{bp}.ffn.dwconv", hidden * 9 + hidden, hidden * 9 * hs * ws))
            layers.append(_linear(f"{bp}.ffn.fc2", hidden, c, hs * ws))
        layers.append(_norm(f"{p}.norm", c))
        cin = c
    return layers


def decoder_costs(cfg: ModelConfig, h: int, w: int, name: str, num_classes: int) -> list:
    enc, tpm = cfg.encoder, cfg.tpm
    c = tpm.embed_dim
    layers = []
    for i in range(4):
        s = enc.strides[i]
        hs, ws = h // s, w // s
        p = f"{name}.tpms.{i}"
        layers.append(_linear(f"{p}.proj", enc.stage_channels[i], c, hs * ws))
        layers.append(_norm(f"{p}.norm", c))
        layers += _attention(f"{p}.attn", c, tpm.sr_ratios[i], hs, ws)
    fused = c * (4 if tpm.fusion_mode == "concat" else 1)
    layers.append(_conv(f"{name}.head.classifier", fused, num_classes, 1, h // 4, w // 4))
    return layers


def count_flops(model_or_cfg, h: int = 512, w: int = 512) -> CostReport:
    """Analytic cost report for a model (or its config) at input ``h x w``."""
    cfg = _cfg(model_or_cfg)
    _check_hw(h, w)
    layers = encoder_costs(cfg, h, w)
    layers += decoder_costs(cfg, h, w, "general", cfg.general_classes)
    if cfg.dual_head:
        layers += decoder_costs(cfg, h, w, "trans", cfg.trans_classes)
    return CostReport(h, w, layers)


def analytic_params(model_or_cfg) -> int:
    """Parameter total from the formulas alone (input size does not matter)."""
    cfg = _cfg(model_or_cfg)
    return count_flops(cfg, *cfg.encoder.base_resolution).params


def count_params(model) -> int:
    """Total scalar parameters by enumerating the model's stored tensors."""
    return int(sum(p.size for p in model.parameters()))


def _cfg(model_or_cfg) -> ModelConfig:
    return model_or_cfg if isinstance(model_or_cfg, ModelConfig) else model_or_cfg.cfg


# -- wall clock ------------------------------------------------------------------------

def measure_latency(model, h: int, w: int, runs: int = 10, warmup: int = 2, seed: int = 0) -> LatencyStats:
    """Mean and stddev of forward wall-clock time, single-threaded, warmup discarded."""
    from threadpoolctl import threadpool_limits

    from .tensor import Tensor, no_grad

    if runs < 10:
        raise ValueError(f"latency needs at least 10 runs, got {runs}")
    dtype = model.parameters()[0].dtype
    image = Tensor(np.random.default_rng(seed).random((3, h, w)).astype(dtype))
    samples = []
    with threadpool_limits(limits=1), no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            model(image)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                samples.append(dt)
    std = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return LatencyStats(statistics.fmean(samples), std, samples)
