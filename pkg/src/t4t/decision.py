"""Per-cycle feedback selection for the assistive navigation loop.

Each cycle of frames is reduced to a consensus segmentation plus depth, and
exactly one event is chosen by a fixed priority chain:

1. obstacle: mean valid depth below ``theta_obstacle_m`` (or too little
   valid depth) -> ``Vibration``
2. transparent stuff covering more than ``theta_trans`` of the image
   -> ``StuffSpeech``
3. a walkable band ratio above ``theta_walkable`` -> ``DirectionSpeech``
4. otherwise the nearest transparent thing / general object -> ``ObjectSpeech``
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError

DIRECTIONS = ("left", "forward", "right")


@dataclass(frozen=True)
class ClassTable:
    """Names of one head's classes and how they split for the decision logic.

    ``path`` / ``stuff`` / ``things`` hold class indices; ``background`` is
    the index of the scene backdrop (the fill used for empty scenes), which
    belongs to no decision set on the transparency head.
    """

    names: tuple
    background: int
    path: tuple = ()
    stuff: tuple = ()
    things: tuple = ()

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


GENERAL_CLASSES = ClassTable(
    names=("beam", "board", "bookcase", "ceiling", "chair", "clutter", "column",
           "door", "floor", "sofa", "table", "wall", "window"),
    background=11,
    path=(8,),
)

TRANS_CLASSES = ClassTable(
    names=("background", "shelf", "jar/tank", "freezer", "window", "glass door", "eyeglass",
           "cup", "glass wall", "bowl", "bottle", "box"),
    background=0,
    stuff=(4, 5, 8),
    things=(1, 2, 3, 6, 7, 9, 10, 11),
)

TOY_GENERAL_CLASSES = ClassTable(names=("wall", "floor", "door", "table"), background=0, path=(1,))
TOY_TRANS_CLASSES = ClassTable(names=("background", "window", "glass door", "cup"), background=0,
                               stuff=(1, 2), things=(3,))


def class_tables(num_general: int, num_trans: int) -> tuple:
    """Pick the full or toy tables matching a model's head sizes."""
    tables = {len(GENERAL_CLASSES): GENERAL_CLASSES, len(TOY_GENERAL_CLASSES): TOY_GENERAL_CLASSES}
    ttables = {len(TRANS_CLASSES): TRANS_CLASSES, len(TOY_TRANS_CLASSES): TOY_TRANS_CLASSES}
    if num_general not in tables or num_trans not in ttables:
        raise ConfigError(f"no class tables for {num_general} general / {num_trans} transparency classes")
    return tables[num_general], ttables[num_trans]


@dataclass(frozen=True)
class DecisionConfig:
    theta_obstacle_m: float = 1.0
    theta_trans: float = 0.5
    theta_walkable: float = 0.4
    cycle_frames: int = 20
    min_valid_depth_fraction: float = 0.10
    min_object_area_fraction: float = 0.01

    def __post_init__(self):
        for name in ("theta_trans", "theta_walkable", "min_valid_depth_fraction", "min_object_area_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.theta_obstacle_m < 0.5:
            raise ConfigError(f"theta_obstacle_m must be >= 0.5 m (sensor minimum range), got {self.theta_obstacle_m}")
        if self.cycle_frames < 1:
            raise ConfigError(f"cycle_frames must be >= 1, got {self.cycle_frames}")


@dataclass
class FeedbackEvent:
    kind: str  # Vibration | StuffSpeech | DirectionSpeech | ObjectSpeech
    label: Optional[str] = None
    mean_depth_m: float = 0.0
    winning_fraction: Optional[float] = None
    timestamp: float = field(default_factory=time.time)

    def to_record(self, cycle_index: int, wall_time_ms: float) -> dict:
        return {
            "cycle_index": cycle_index,
            "kind": self.kind,
            "class_or_direction": self.label,
            "mean_depth_m": round(float(self.mean_depth_m), 6),
            "winning_fraction": None if self.winning_fraction is None else round(float(self.winning_fraction), 6),
            "wall_time_ms": round(float(wall_time_ms), 3),
        }


@dataclass
class WalkableRatios:
    r_left: float
    r_forward: float
    r_right: float

    def as_tuple(self) -> tuple:
        return (self.r_left, self.r_forward, self.r_right)


@dataclass
class Masks:
    g_path: np.ndarray
    g_object: np.ndarray
    t_stuff: np.ndarray
    t_thing: np.ndarray


@dataclass
class Consensus:
    general: np.ndarray  # [H, W] class indices
    trans: np.ndarray  # [H, W] class indices
    depth_mm: np.ndarray  # [H, W], 0 = invalid


# -- primitives ---------------------------------------------------------------------

def _check_classes(arr: np.ndarray, table: ClassTable, what: str) -> None:
    if arr.size and (arr.min() < 0 or arr.max() >= len(table)):
        raise ValueError(f"{what}: class index outside [0, {len(table)})")


def split_predictions(g_argmax, t_argmax, general: ClassTable = GENERAL_CLASSES,
                      trans: ClassTable = TRANS_CLASSES) -> Masks:
    g = np.asarray(g_argmax)
    t = np.asarray(t_argmax)
    if g.shape != t.shape:
        raise ValueError(f"general map {g.shape} and transparency map {t.shape} differ")
    _check_classes(g, general, "general map")
    _check_classes(t, trans, "transparency map")
    g_path = np.isin(g, general.path)
    return Masks(
        g_path=g_path,
        g_object=~g_path,
        t_stuff=np.isin(t, trans.stuff),
        t_thing=np.isin(t, trans.things),
    )


def mean_depth(depth_mm) -> tuple:
    """(mean over valid pixels in metres, fraction of valid pixels)."""
    d = np.asarray(depth_mm)
    valid = d > 0
    n = int(valid.sum())
    if d.size == 0:
        return 0.0, 0.0
    if n == 0:
        return 0.0, 0.0
    return float(d[valid].astype(np.float64).sum() / n / 1000.0), n / d.size


def band_edges(width: int) -> tuple:
    """Column boundaries of the left/forward/right bands; leftovers widen the centre."""
    base = width // 3
    rem = width - 3 * base
    return (0, base, 2 * base + rem, width)


def walkable_ratios(g_path) -> WalkableRatios:
    mask = np.asarray(g_path, dtype=bool)
    h, w = mask.shape
    e = band_edges(w)
    ratios = []
    for i in range(3):
        band = mask[:, e[i]:e[i + 1]]
        ratios.append(float(band.sum()) / band.size if band.size else 0.0)
    return WalkableRatios(*ratios)


def _mode(stack: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.stack([(stack == k).sum(axis=0) for k in range(num_classes)])
    return counts.argmax(axis=0)  # ties -> lowest index


def aggregate_cycle(frames: Sequence[tuple]) -> Consensus:
    """Per-pixel modal classes and per-pixel median valid depth over a cycle."""
    if not frames:
        raise ValueError("cannot aggregate an empty cycle")
    g = np.stack([np.asarray(f[0]) for f in frames])
    t = np.stack([np.asarray(f[1]) for f in frames])
    d = np.stack([np.asarray(f[2]) for f in frames]).astype(np.float64)
    if len(frames) == 1:
        return Consensus(g[0].copy(), t[0].copy(), d[0].copy())
    g_mode = _mode(g, int(g.max()) + 1)
    t_mode = _mode(t, int(t.max()) + 1)
    masked = np.where(d > 0, d, np.nan)
    all_invalid = np.all(np.isnan(masked), axis=0)
    masked[:, all_invalid] = 0.0
    depth = np.nanmedian(masked, axis=0)
    return Consensus(g_mode, t_mode, depth)


# -- the decision --------------------------------------------------------------------

def decide(consensus: Consensus, cfg: DecisionConfig = DecisionConfig(),
           general: ClassTable = GENERAL_CLASSES, trans: ClassTable = TRANS_CLASSES) -> FeedbackEvent:
    masks = split_predictions(consensus.general, consensus.trans, general, trans)
    depth = np.asarray(consensus.depth_mm, dtype=np.float64)
    d_mean, valid_frac = mean_depth(depth)

    if valid_frac < cfg.min_valid_depth_fraction or d_mean < cfg.theta_obstacle_m:
        frac = valid_frac if valid_frac < cfg.min_valid_depth_fraction else None
        return FeedbackEvent("Vibration", None, d_mean, frac)

    area = consensus.trans.size
    stuff = [(int((consensus.trans == k).sum()) / area, k) for k in trans.stuff]
    if stuff:
        best = max(f for f, _ in stuff)
        if best > cfg.theta_trans:
            k = min(k for f, k in stuff if f == best)
            return FeedbackEvent("StuffSpeech", trans.names[k], d_mean, best)

    ratios = walkable_ratios(masks.g_path).as_tuple()
    best = max(ratios)
    if best > cfg.theta_walkable:
        winners = [i for i, r in enumerate(ratios) if r == best]
        idx = 1 if 1 in winners else winners[0]
        return FeedbackEvent("DirectionSpeech", DIRECTIONS[idx], d_mean, best)

    label, frac = nearest_object(consensus, masks, cfg, general, trans)
    return FeedbackEvent("ObjectSpeech", label, d_mean, frac)


def nearest_object(consensus: Consensus, masks: Masks, cfg: DecisionConfig,
                   general: ClassTable, trans: ClassTable) -> tuple:
    """Class with the smallest mean valid depth among large-enough candidates.

    Candidates are transparent things first, then general non-path classes
    (that order breaks depth ties). Without any depth-qualified candidate the
    largest-area candidate wins; with no candidate pixels at all, the
    largest general class.
    """
    area = consensus.general.size
    depth = np.asarray(consensus.depth_mm, dtype=np.float64)
    candidates = []  # (mean depth or inf, -fraction, order, name, fraction)
    order = 0
    for table, labels, ids in ((trans, consensus.trans, trans.things),
                               (general, consensus.general,
                                [k for k in range(len(general)) if k not in general.path])):
        for k in ids:
            mask = labels == k
            n = int(mask.sum())
            if n == 0:
                order += 1
                continue
            frac = n / area
            valid = mask & (depth > 0)
            mean = depth[valid].mean() if valid.any() else np.inf
            candidates.append((mean, frac, order, table.names[k]))
            order += 1
    qualified = [c for c in candidates if c[1] >= cfg.min_object_area_fraction and np.isfinite(c[0])]
    if qualified:
        best = min(qualified, key=lambda c: (c[0], c[2]))
        return best[3], best[1]
    if candidates:
        best = min(candidates, key=lambda c: (-c[1], c[2]))
        return best[3], best[1]
    counts = np.bincount(consensus.general.reshape(-1), minlength=len(general))
    k = int(counts.argmax())
    return general.names[k], counts[k] / area


class DecisionEngine:
    """Buffers frames and emits one event per completed cycle."""

    def __init__(self, cfg: DecisionConfig = DecisionConfig(), general: ClassTable = GENERAL_CLASSES,
                 trans: ClassTable = TRANS_CLASSES):
        self.cfg = cfg
        self.general, self.trans = general, trans
        self.buffer: list = []
        self.cycle_index = 0

    def push(self, g_argmax, t_argmax, depth_mm) -> Optional[FeedbackEvent]:
        self.buffer.append((g_argmax, t_argmax, depth_mm))
        if len(self.buffer) >= self.cfg.cycle_frames:
            return self._fire()
        return None

    def flush(self) -> Optional[FeedbackEvent]:
        """Decide on a partial trailing cycle, if any frames are pending."""
        return self._fire() if self.buffer else None

    def _fire(self) -> FeedbackEvent:
        consensus = aggregate_cycle(self.buffer)
        self.buffer = []
        event = decide(consensus, self.cfg, self.general, self.trans)
        self.cycle_index += 1
        return event


def event_log_line(event: FeedbackEvent, cycle_index: int, wall_time_ms: float) -> str:
    return json.dumps(event.to_record(cycle_index, wall_time_ms), sort_keys=True) + "\n"
