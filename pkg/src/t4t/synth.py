"""Deterministic toy RGB-D scenes with labels for both heads.

A scene is a backdrop wall, an optional floor band at the bottom, and a list
of rectangles drawn in order (later ones overwrite earlier ones). Opaque
rectangles carry a general-head class. Glass rectangles carry a
transparency-head class and are alpha-blended over whatever lies beneath:
``pixel = alpha * colour + (1 - alpha) * underneath``. The interior uses
``alpha`` (default 0.25). A 2-pixel frame uses ``FRAME_ALPHA`` and a darker
frame colour. Under glass the general label stays whatever was visible
through it.

Randomness comes from numpy's PCG64 generator, seeded per scene.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decision import GENERAL_CLASSES, TRANS_CLASSES, ClassTable
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

log = logging.getLogger(__name__)

FRAME_ALPHA = 0.9
FRAME_WIDTH = 2
NOISE_AMPLITUDE = 6


@dataclass(frozen=True)
class PlacedObject:
    head: str  # "general" or "trans"
    cls: int
    rect: tuple  # (top, left, bottom, right), half-open
    depth_mm: int
    color: tuple
    alpha: Optional[float] = None  # glass when set


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: tuple = (32, 32)
    floor_fraction: float = 0.0
    objects: tuple = ()
    wall_depth_mm: int = 0
    floor_near_mm: int = 1500
    floor_far_mm: int = 4000
    general: ClassTable = GENERAL_CLASSES
    trans: ClassTable = TRANS_CLASSES

    def __post_init__(self):
        h, w = self.size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ValueError(f"scene size {self.size} must be a positive multiple of 32")
        for obj in self.objects:
            t, l, b, r = obj.rect
            if not (0 <= t < b <= h and 0 <= l < r <= w):
                raise ValueError(f"object rectangle {obj.rect} outside {h}x{w}")


@dataclass
class FrameInput:
    rgb: np.ndarray  # [3, H, W] float32 in [0, 1]
    depth_mm: np.ndarray  # [H, W] uint16, 0 = invalid

    def __post_init__(self):
        if self.rgb.shape[1:] != self.depth_mm.shape:
            raise ValueError(f"rgb {self.rgb.shape} and depth {self.depth_mm.shape} disagree")

    @property
    def rgb_u8(self) -> np.ndarray:
        return np.rint(np.transpose(self.rgb, (1, 2, 0)) * 255.0).astype(np.uint8)


@dataclass
class Scene:
    frame: FrameInput
    gt_general: np.ndarray
    gt_trans: np.ndarray
    spec: SceneSpec

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.frame.rgb_u8, self.frame.depth_mm, self.gt_general, self.gt_trans):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def class_color(head: str, cls: int) -> tuple:
    """Stable, well-separated base colour for a class."""
    rng = np.random.default_rng([0 if head == "general" else 1, cls])
    return tuple(int(v) for v in rng.integers(30, 226, size=3))


def frame_color(color: Sequence[int]) -> tuple:
    return tuple(int(c) // 3 for c in color)


def blend(color, under, alpha):
    return alpha * np.asarray(color, dtype=np.float64)[:, None] + (1.0 - alpha) * under


def render_layers(spec: SceneSpec) -> tuple:
    """Float RGB canvas ``[3,H,W]`` in 0..255, float depth in mm, general and transparency labels."""
    h, w = spec.size
    rng = np.random.default_rng(spec.seed)
    noise = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=(3, h, w)).astype(np.float64)

    canvas = np.empty((3, h, w), dtype=np.float64)
    canvas[:] = np.asarray(class_color("general", spec.general.background), dtype=np.float64)[:, None, None]
    canvas += noise
    depth = np.full((h, w), spec.wall_depth_mm, dtype=np.float64)
    gt_g = np.full((h, w), spec.general.background, dtype=np.uint8)
    gt_t = np.full((h, w), spec.trans.background, dtype=np.uint8)

    floor_rows = int(round(spec.floor_fraction * h))
    if floor_rows > 0 and spec.general.path:
        floor = spec.general.path[0]
        top = h - floor_rows
        canvas[:, top:, :] = np.asarray(class_color("general", floor), dtype=np.float64)[:, None, None]
        canvas[:, top:, :] += noise[:, top:, :]
        gt_g[top:, :] = floor
        # nearest at the bottom row, farthest at the band's top edge
        rows = np.arange(top, h)
        t = (h - 1 - rows) / max(floor_rows - 1, 1)
        depth[top:, :] = (spec.floor_near_mm + t * (spec.floor_far_mm - spec.floor_near_mm))[:, None]

    for obj in spec.objects:
        t0, l0, b0, r0 = obj.rect
        region = (slice(None), slice(t0, b0), slice(l0, r0))
        if obj.alpha is None:
            canvas[region] = np.asarray(obj.color, dtype=np.float64)[:, None, None] + noise[region]
            gt_g[t0:b0, l0:r0] = obj.cls
            gt_t[t0:b0, l0:r0] = spec.trans.background
        else:
            under = canvas[region].copy()
            inner = np.zeros((b0 - t0, r0 - l0), dtype=bool)
            fw = FRAME_WIDTH
            inner[fw:-fw or None, fw:-fw or None] = True
            fc = frame_color(obj.color)
            out = np.where(inner[None], blend(obj.color, under.reshape(3, -1), obj.alpha).reshape(under.shape),
                           blend(fc, under.reshape(3, -1), FRAME_ALPHA).reshape(under.shape))
            canvas[region] = out
            gt_t[t0:b0, l0:r0] = obj.cls
        depth[t0:b0, l0:r0] = obj.depth_mm

    return canvas, depth, gt_g, gt_t


def generate_scene(spec: SceneSpec) -> Scene:
    canvas, depth, gt_g, gt_t = render_layers(spec)
    rgb_u8 = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    frame = FrameInput(rgb_u8.astype(np.float32) / 255.0, np.clip(np.rint(depth), 0, 65535).astype(np.uint16))
    return Scene(frame, gt_g, gt_t, spec)


def random_spec(seed: int, size=(32, 32), general: ClassTable = GENERAL_CLASSES,
                trans: ClassTable = TRANS_CLASSES, max_objects: int = 3) -> SceneSpec:
    rng = np.random.default_rng(seed)
    h, w = size
    general_ids = [k for k in range(len(general)) if k not in general.path and k != general.background]
    trans_ids = [k for k in range(len(trans)) if k != trans.background]
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        oh = int(rng.integers(max(h // 4, 2 * FRAME_WIDTH + 2), h // 2 + 1))
        ow = int(rng.integers(max(w // 4, 2 * FRAME_WIDTH + 2), w // 2 + 1))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        depth = int(rng.integers(800, 4001))
        if rng.random() < 0.5 or not general_ids:
            cls = int(rng.choice(trans_ids))
            objects.append(PlacedObject("trans", cls, (top, left, top + oh, left + ow), depth,
                                        class_color("trans", cls), alpha=0.25))
        else:
            cls = int(rng.choice(general_ids))
            objects.append(PlacedObject("general", cls, (top, left, top + oh, left + ow), depth,
                                        class_color("general", cls)))
    return SceneSpec(
        seed=seed, size=tuple(size), floor_fraction=float(rng.uniform(0.25, 0.5)), objects=tuple(objects),
        wall_depth_mm=int(rng.integers(3000, 6001)), general=general, trans=trans,
    )


def derive_seed(seed: int, index: int) -> int:
    return seed + index


@dataclass
class Dataset:
    scenes: list
    balance: dict = field(default_factory=dict)


def class_balance(scenes: Sequence[Scene]) -> dict:
    g, t = Counter(), Counter()
    for s in scenes:
        g.update(dict(enumerate(np.bincount(s.gt_general.reshape(-1), minlength=len(s.spec.general)).tolist())))
        t.update(dict(enumerate(np.bincount(s.gt_trans.reshape(-1), minlength=len(s.spec.trans)).tolist())))
    return {"general": dict(sorted(g.items())), "trans": dict(sorted(t.items()))}


def generate_dataset(n: int, seed: int = 0, size=(32, 32), general: ClassTable = GENERAL_CLASSES,
                     trans: ClassTable = TRANS_CLASSES) -> Dataset:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    scenes = [generate_scene(random_spec(derive_seed(seed, i), size, general, trans)) for i in range(n)]
    balance = class_balance(scenes)
    log.info("class balance (pixels): general=%s trans=%s", balance["general"], balance["trans"])
    return Dataset(scenes, balance)


# -- on-disk layout ---------------------------------------------------------------------
# NNNNNN.ppm          RGB, P6 8-bit
# NNNNNN.pgm          depth, P5 16-bit big-endian millimetres
# NNNNNN_general.pgm  general labels, P5 8-bit
# NNNNNN_trans.pgm    transparency labels, P5 8-bit

def write_scene(directory, index: int, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"{index:06d}"
    write_ppm(d / f"{stem}.ppm", scene.frame.rgb_u8)
    write_pgm(d / f"{stem}.pgm", scene.frame.depth_mm.astype(np.uint16), maxval=65535)
    write_pgm(d / f"{stem}_general.pgm", scene.gt_general, maxval=255)
    write_pgm(d / f"{stem}_trans.pgm", scene.gt_trans, maxval=255)


def write_dataset(directory, dataset: Dataset, start: int = 1) -> None:
    for i, scene in enumerate(dataset.scenes):
        write_scene(directory, start + i, scene)


def frame_stems(directory) -> list:
    """Sorted six-digit stems that have an RGB image."""
    return sorted(p.stem for p in Path(directory).glob("*.ppm") if p.stem.isdigit() and len(p.stem) == 6)


def read_frame(directory, stem: str) -> FrameInput:
    d = Path(directory)
    rgb = read_ppm(d / f"{stem}.ppm")
    depth = read_pgm(d / f"{stem}.pgm").astype(np.uint16)
    return FrameInput(np.transpose(rgb, (2, 0, 1)).astype(np.float32) / 255.0, depth)


def read_labels(directory, stem: str) -> tuple:
    d = Path(directory)
    return read_pgm(d / f"{stem}_general.pgm"), read_pgm(d / f"{stem}_trans.pgm")
