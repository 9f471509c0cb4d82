"""Hand-scripted replay scenarios with known per-cycle outcomes.

Frames are written with their ground-truth label maps so replay can run in
labels mode, where the decision engine sees exactly the scripted consensus.
"""

from pathlib import Path

from t4t.decision import TOY_GENERAL_CLASSES, TOY_TRANS_CLASSES
from t4t.synth import PlacedObject, SceneSpec, class_color, generate_scene, write_scene

G, T = TOY_GENERAL_CLASSES, TOY_TRANS_CLASSES
SIZE = (32, 32)


def obstacle(seed=0):
    """Plain wall 0.8 m away."""
    return SceneSpec(seed=seed, size=SIZE, wall_depth_mm=800, general=G, trans=T)


def glass_door(seed=0):
    """Full-frame glass door 3 m away."""
    door = PlacedObject("trans", T.index("glass door"), (0, 0, 32, 32), 3000,
                        class_color("trans", T.index("glass door")), alpha=0.25)
    return SceneSpec(seed=seed, size=SIZE, wall_depth_mm=3000, objects=(door,), general=G, trans=T)


def clear_floor(seed=0):
    return SceneSpec(seed=seed, size=SIZE, floor_fraction=1.0, general=G, trans=T)


def cup_and_door(seed=0):
    """Nothing walkable or glassy enough; a cup at 1.5 m is nearer than a door at 2.5 m."""
    cup = PlacedObject("trans", T.index("cup"), (4, 2, 14, 12), 1500, class_color("trans", T.index("cup")), alpha=0.25)
    door = PlacedObject("general", G.index("door"), (4, 18, 28, 30), 2500, class_color("general", G.index("door")))
    return SceneSpec(seed=seed, size=SIZE, wall_depth_mm=3000, objects=(cup, door), general=G, trans=T)


def write_frames(directory, specs, drop_depth=()):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, spec in enumerate(specs, start=1):
        write_scene(d, i, generate_scene(spec))
        if i in drop_depth:
            (d / f"{i:06d}.pgm").unlink()
    return d


def scenario_specs():
    """name -> (frame specs, frames whose depth is removed, expected (kind, label) per cycle), cycle 20."""
    return {
        "obstacle_x40": ([obstacle(i) for i in range(40)], (), [("Vibration", None)] * 2),
        "obstacle_glass_floor": (
            [obstacle(i) for i in range(20)] + [glass_door(i) for i in range(20)] + [clear_floor(i) for i in range(20)],
            (),
            [("Vibration", None), ("StuffSpeech", "glass door"), ("DirectionSpeech", "forward")],
        ),
        "empty": ([], (), []),
        # 30 frames, one without depth: a full cycle of 20 then a flushed partial cycle of 9
        "nearest_object_partial": ([cup_and_door(i) for i in range(30)], (7,), [("ObjectSpeech", "cup")] * 2),
    }
