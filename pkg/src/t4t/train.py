"""Optimiser, learning-rate schedule and the training / evaluation loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def poly_lr(base_lr: float, it: int, max_it: int, power: float = 0.9) -> float:
    """``base_lr * (1 - it / max_it) ** power``, clamped at zero past the end."""
    frac = min(max(it / max_it, 0.0), 1.0) if max_it > 0 else 1.0
    return base_lr * (1.0 - frac) ** power


class AdamW:
    """Adam with decoupled weight decay.

    For each parameter ``p`` with gradient ``g`` at step ``t``::

        p <- p - lr * wd * p
        m <- b1 * m + (1 - b1) * g
        v <- b2 * v + (1 - b2) * g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.data *= (1.0 - self.lr * self.weight_decay)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- metrics ----------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts pixels of ground-truth class g predicted as p."""
    idx = gt.astype(np.int64).reshape(-1) * num_classes + pred.astype(np.int64).reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def mean_iou(cm: np.ndarray) -> float:
    """Mean IoU over classes that occur in prediction or ground truth."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    return float((inter[present] / union[present]).mean()) if present.any() else 0.0


@dataclass
class HeadMetrics:
    loss: float
    pixel_acc: float
    miou: float


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    heads: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        rec = {"epoch": self.epoch, "lr": self.lr, "loss": self.loss}
        for name, m in self.heads.items():
            rec[f"{name}_loss"] = m.loss
            rec[f"{name}_pixel_acc"] = m.pixel_acc
            rec[f"{name}_miou"] = m.miou
        return rec


HEAD_NAMES = ("general", "trans")


def _targets(scene, head: int) -> np.ndarray:
    return scene.gt_general if head == 0 else scene.gt_trans


def _num_classes(model, head: int) -> int:
    return model.cfg.general_classes if head == 0 else model.cfg.trans_classes


def train(model, scenes: Sequence, epochs: int, lr: float = 1e-4, batch_size: int = 4,
          poly_power: float = 0.9, weight_decay: float = 1e-4, eps: float = 1e-8,
          head_schedule: str = "joint", seed: int = 0,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> list:
    """Train in place; returns one :class:`EpochLog` per epoch.

    ``head_schedule="alternate"`` updates the encoder plus one head per batch,
    cycling heads batch by batch; ``"joint"`` sums both heads' losses 1:1.
    """
    if head_schedule not in ("alternate", "joint"):
        raise ValueError(f"unknown head schedule {head_schedule!r}")
    n_heads = len(model.decoders)
    opt = AdamW(model.parameters(), lr=lr, eps=eps, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    batches_per_epoch = math.ceil(len(scenes) / batch_size)
    max_it = epochs * batches_per_epoch
    dtype = model.parameters()[0].dtype
    history = []
    it = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(scenes))
        loss_sum, loss_n = np.zeros(n_heads), np.zeros(n_heads)
        cms = [np.zeros((_num_classes(model, h),) * 2, dtype=np.int64) for h in range(n_heads)]
        epoch_lr = poly_lr(lr, it, max_it, poly_power)
        for b in range(batches_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            heads = [it % n_heads] if head_schedule == "alternate" else list(range(n_heads))
            opt.lr = poly_lr(lr, it, max_it, poly_power)
            opt.zero_grad()
            for i in idx:
                scene = scenes[i]
                image = Tensor(scene.frame.rgb.astype(dtype))
                pyramid = model.encoder(image)
                total = None
                for h in heads:
                    logits = model.decoders[h](pyramid)
                    loss = ops.cross_entropy(logits, _targets(scene, h))
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, head {HEAD_NAMES[h]}")
                    loss_sum[h] += value
                    loss_n[h] += 1
                    cms[h] += confusion_matrix(logits.data.argmax(0), _targets(scene, h), cms[h].shape[0])
                    total = loss if total is None else total + loss
                backward(total * (1.0 / len(idx)))
            opt.step()
            it += 1
        heads_log = {}
        for h in range(n_heads):
            if loss_n[h]:
                heads_log[HEAD_NAMES[h]] = HeadMetrics(loss_sum[h] / loss_n[h], pixel_accuracy(cms[h]), mean_iou(cms[h]))
        # per-sample loss summed over the heads each sample was trained on
        mean_loss = float(loss_sum.sum() / max(loss_n.max(), 1)) if head_schedule == "joint" \
            else float(loss_sum.sum() / max(loss_n.sum(), 1))
        entry = EpochLog(epoch, epoch_lr, mean_loss, heads_log)
        history.append(entry)
        log.info("epoch %d lr %.2e loss %.4f %s", epoch, epoch_lr, mean_loss,
                 {k: round(v.pixel_acc, 4) for k, v in heads_log.items()})
        if on_epoch is not None:
            on_epoch(entry)
    return history


def evaluate(model, scenes: Sequence) -> dict:
    """Pixel accuracy, mIoU and confusion matrix per head, without gradients."""
    dtype = model.parameters()[0].dtype
    cms = [np.zeros((_num_classes(model, h),) * 2, dtype=np.int64) for h in range(len(model.decoders))]
    with no_grad():
        for scene in scenes:
            out = model(Tensor(scene.frame.rgb.astype(dtype)))
            preds = out.argmax()
            for h in range(len(model.decoders)):
                cms[h] += confusion_matrix(preds[h], _targets(scene, h), cms[h].shape[0])
    return {HEAD_NAMES[h]: {"pixel_acc": pixel_accuracy(cm), "miou": mean_iou(cm), "confusion": cm}
            for h, cm in enumerate(cms)}
