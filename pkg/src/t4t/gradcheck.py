"""Central finite-difference checks of the analytic gradients.

Everything here runs in float64; callers pass float64 tensors/models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward

STEP = 1e-4
TOLERANCE = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_function(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = STEP) -> float:
    """Worst relative error over all inputs of ``fn(*tensors) -> scalar``."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(*tensors))
    worst = 0.0
    for t in tensors:
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn(*[Tensor(x.data) for x in tensors]).data)
            flat[i] = orig - step
            down = float(fn(*[Tensor(x.data) for x in tensors]).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_module(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], samples_per_param: int = 2,
                 step: float = STEP, seed: int = 0) -> float:
    """Relative error between analytic and numeric gradients on sampled coordinates.

    ``loss_fn`` re-runs the forward pass with the current parameter values.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic, numeric = [], []
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        picks = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            analytic.append(grad[i])
            numeric.append((up - down) / (2 * step))
    return relative_error(np.array(analytic), np.array(numeric))


@dataclass
class GradResult:
    name: str
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def _weighted(y: Tensor, seed: int) -> Tensor:
    """Scalar with a fixed, non-uniform upstream gradient."""
    w = Tensor(np.random.default_rng(seed).standard_normal(y.shape).astype(y.dtype))
    return ops.sum(ops.mul(y, w))


def op_cases(seed: int = 0) -> list:
    """(name, fn, input arrays) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    target = rng.integers(0, 3, size=(3, 4))
    target[0, 0] = 255
    wseed = seed + 1
    return [
        ("add", lambda a, b: _weighted(a + b, wseed), [r((3, 4)), r((3, 4))]),
        ("sub", lambda a, b: _weighted(a - b, wseed), [r((3, 4)), r((3, 4))]),
        ("mul", lambda a, b: _weighted(a * b, wseed), [r((3, 4)), r((3, 4))]),
        ("scale_shift", lambda a: _weighted(a * 1.7 + 0.3, wseed), [r((5,))]),
        ("add_bias_tokens", lambda x, b: _weighted(ops.add_bias(x, b, -1), wseed), [r((4, 3)), r(3)]),
        ("add_bias_map", lambda x, b: _weighted(ops.add_bias(x, b, 0), wseed), [r((2, 3, 3)), r(2)]),
        ("gelu", lambda a: _weighted(ops.gelu(a), wseed), [r((3, 5)) * 2]),
        ("reshape", lambda a: _weighted(ops.reshape(a, (6, 2)), wseed), [r((3, 4))]),
        ("transpose", lambda a: _weighted(ops.transpose(a, (2, 0, 1)), wseed), [r((2, 3, 4))]),
        ("concat", lambda a, b: _weighted(ops.concat([a, b], 0), wseed), [r((2, 3, 3)), r((1, 3, 3))]),
        ("sum", lambda a: ops.sum(ops.mul(a, a)), [r((3, 3))]),
        ("mean", lambda a: ops.mean(ops.mul(a, a)), [r((3, 3))]),
        ("matmul", lambda a, b: _weighted(ops.matmul(a, b), wseed), [r((4, 3)), r((3, 5))]),
        ("matmul_batched", lambda a, b: _weighted(ops.matmul(a, b), wseed), [r((2, 4, 3)), r((2, 3, 2))]),
        ("conv2d", lambda x, w, b: _weighted(ops.conv2d(x, w, b, stride=2, pad=1), wseed),
         [r((2, 6, 6)), r((3, 2, 3, 3)), r(3)]),
        ("conv2d_patch", lambda x, w: _weighted(ops.conv2d(x, w, None, stride=4, pad=3), wseed),
         [r((2, 8, 8)), r((2, 2, 7, 7))]),
        ("depthwise_conv2d", lambda x, w, b: _weighted(ops.depthwise_conv2d(x, w, b, stride=1, pad=1), wseed),
         [r((3, 5, 5)), r((3, 1, 3, 3)), r(3)]),
        ("softmax", lambda a: _weighted(ops.softmax(a, axis=-1), wseed), [r((3, 5))]),
        ("softmax_axis0", lambda a: _weighted(ops.softmax(a, axis=0), wseed), [r((4, 3))]),
        ("layer_norm", lambda x, g, b: _weighted(ops.layer_norm(x, g, b, 1e-6), wseed),
         [r((4, 6)), r(6), r(6)]),
        ("bilinear_up", lambda a: _weighted(ops.bilinear_resize(a, 5, 7), wseed), [r((2, 3, 4))]),
        ("bilinear_down", lambda a: _weighted(ops.bilinear_resize(a, 2, 3), wseed), [r((2, 5, 6))]),
        ("cross_entropy", lambda a: ops.cross_entropy(a, target), [r((3, 3, 4))]),
    ]


def module_cases(seed: int = 0) -> list:
    """(name, loss_fn, params) for the model building blocks and the toy model, in float64."""
    from .config import TpmConfig, preset
    from .decoder import TPM, SegHead, Trans4Trans
    from .encoder import Attention, DWFeedForward

    rng = np.random.default_rng(seed)
    cases = []

    def tensor(shape):
        return Tensor(rng.standard_normal(shape))

    for sr in (1, 2):
        attn = Attention(8, 2, sr, np.random.default_rng(seed)).astype(np.float64)
        x = tensor((16, 8))
        w = tensor((16, 8))
        cases.append((f"attention_sr{sr}", (lambda a=attn, x=x, w=w: ops.sum(ops.mul(a(x, 4, 4), w))),
                      attn.parameters()))
    ffn = DWFeedForward(6, 2, np.random.default_rng(seed)).astype(np.float64)
    xf, wf = tensor((16, 6)), tensor((16, 6))
    cases.append(("dw_ffn", lambda: ops.sum(ops.mul(ffn(xf, 4, 4), wf)), ffn.parameters()))
    tpm = TPM(8, TpmConfig(embed_dim=4, sr_ratios=(1, 1, 1, 1)), 1, np.random.default_rng(seed)).astype(np.float64)
    xt, wt = tensor((8, 2, 2)), tensor((4, 4, 4))
    cases.append(("tpm", lambda: ops.sum(ops.mul(tpm(xt, 4, 4), wt)), tpm.parameters()))
    head = SegHead(4, 3, np.random.default_rng(seed)).astype(np.float64)
    xh = tensor((4, 2, 2))
    th = rng.integers(0, 3, size=(8, 8))
    cases.append(("seg_head", lambda: ops.cross_entropy(head(xh, 8, 8), th), head.parameters()))

    model = Trans4Trans(preset("toy"), seed=seed).astype(np.float64)
    image = Tensor(rng.random((3, 32, 32)))
    tg = rng.integers(0, 4, size=(32, 32))
    tt = rng.integers(0, 4, size=(32, 32))

    def joint():
        out = model(image)
        return ops.cross_entropy(out.general_logits, tg) + ops.cross_entropy(out.trans_logits, tt)

    cases.append(("toy_model_joint_loss", joint, model.parameters()))
    return cases


def run_suite(seed: int = 0) -> list:
    results = [GradResult(name, check_function(fn, arrays)) for name, fn, arrays in op_cases(seed)]
    for name, loss_fn, params in module_cases(seed):
        results.append(GradResult(name, check_module(loss_fn, params, seed=seed)))
    return results
