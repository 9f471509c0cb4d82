"""``t4t`` command-line entry point.

Subcommands: synth, train, infer, replay, metrics, gradcheck, export-features.
Every subcommand accepts ``--config PATH`` (flat key=value file), repeated
``--set key=value`` overrides, ``--model TAG`` and the decision threshold
flags. Command-line values override the config file. Validation errors exit
with status 2; a failed gradient check exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import queue
import sys
import threading
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .decision import DecisionEngine, class_tables, event_log_line
from .decoder import Trans4Trans, export_feature_maps
from .encoder import check_input
from .netpbm import NetpbmError, read_pgm, read_ppm, write_ppm
from .tensor import Tensor, no_grad

log = logging.getLogger("t4t")

# Fixed mask palettes. Index i of a head's argmax map is drawn with entry i.
GENERAL_PALETTE = (
    (120, 120, 120), (180, 120, 120), (6, 230, 230), (80, 50, 50), (4, 200, 3), (120, 120, 80),
    (140, 140, 140), (204, 5, 255), (230, 230, 230), (4, 250, 7), (224, 5, 255), (235, 255, 7),
    (150, 5, 61),
)
TRANS_PALETTE = (
    (0, 0, 0), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189), (140, 86, 75),
    (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207), (31, 119, 180), (255, 187, 120),
)

THRESHOLD_FLAGS = ("theta_obstacle_m", "theta_trans", "theta_walkable", "cycle_frames",
                   "min_valid_depth_fraction", "min_object_area_fraction")

QUEUE_DEPTH = 4


class CliError(Exception):
    """Validation failure reported to the user with exit status 2."""


# -- configuration ----------------------------------------------------------------------

def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.model:
        cfg.set("model", args.model)
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    for name in THRESHOLD_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            cfg.set(name, str(value))
    cfg.decision_config()  # validate thresholds early
    cfg.model_config()
    return cfg


def colorize(mask: np.ndarray, palette) -> np.ndarray:
    table = np.asarray(palette, dtype=np.uint8)
    if mask.max(initial=0) >= len(table):
        raise CliError(f"class index {int(mask.max())} has no palette entry")
    return table[mask]


def _load_model(cfg: RunConfig, checkpoint) -> Trans4Trans:
    if checkpoint:
        return load_checkpoint(checkpoint)
    log.warning("no checkpoint given; using randomly initialised %s weights", cfg.model)
    return Trans4Trans(cfg.model_config(), seed=cfg.seed)


def _read_image(path) -> Tensor:
    rgb = read_ppm(path)
    image = Tensor(np.transpose(rgb, (2, 0, 1)).astype(np.float32) / 255.0)
    check_input(image)
    return image


def _read_scenes(directory):
    from .synth import Scene, frame_stems, read_frame, read_labels

    stems = frame_stems(directory)
    if not stems:
        raise CliError(f"no NNNNNN.ppm frames in {directory}")
    scenes = []
    for stem in stems:
        frame = read_frame(directory, stem)
        g, t = read_labels(directory, stem)
        scenes.append(Scene(frame, g.astype(np.int64), t.astype(np.int64), None))
    return scenes


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    from .synth import generate_dataset, write_dataset

    mc = cfg.model_config()
    general, trans = class_tables(mc.general_classes, mc.trans_classes)
    ds = generate_dataset(args.count, seed=cfg.seed, size=(args.size, args.size), general=general, trans=trans)
    write_dataset(args.out, ds)
    print(json.dumps({"written": len(ds.scenes), "dir": str(args.out), "balance": ds.balance}))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import train

    data_dir = args.dataset or cfg.dataset_dir
    if not data_dir:
        raise CliError("train needs --dataset DIR or dataset_dir in the config")
    out = Path(args.out or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    scenes = _read_scenes(data_dir)
    model = Trans4Trans(cfg.model_config(), seed=cfg.seed)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        def on_epoch(entry):
            fh.write(json.dumps(entry.as_record(), sort_keys=True) + "\n")
            fh.flush()

        train(model, scenes, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
              poly_power=cfg.poly_power, weight_decay=cfg.weight_decay, eps=cfg.adam_eps,
              head_schedule=cfg.head_schedule, seed=cfg.seed, on_epoch=on_epoch)
    save_checkpoint(out / "model.t4t", model)
    (out / "run.cfg").write_text(cfg.render())
    print(json.dumps({"checkpoint": str(out / "model.t4t"), "log": str(log_path)}))
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    from .train import confusion_matrix, mean_iou, pixel_accuracy

    model = _load_model(cfg, args.checkpoint)
    image = _read_image(args.image)
    with no_grad():
        preds = model(image).argmax()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    names = ("general", "trans")
    palettes = (GENERAL_PALETTE, TRANS_PALETTE)
    num_classes = (model.cfg.general_classes, model.cfg.trans_classes)
    lines = []
    for head, pred in enumerate(preds):
        write_ppm(out / f"{stem}_{names[head]}_mask.ppm", colorize(pred, palettes[head]))
        counts = np.bincount(pred.reshape(-1), minlength=num_classes[head])
        record = {"head": names[head], "counts": {str(k): int(v) for k, v in enumerate(counts)}}
        gt_path = Path(args.image).with_name(f"{stem}_{names[head]}.pgm")
        if gt_path.exists():
            cm = confusion_matrix(pred, read_pgm(gt_path), num_classes[head])
            record["miou"] = round(mean_iou(cm), 6)
            record["pixel_acc"] = round(pixel_accuracy(cm), 6)
        lines.append(json.dumps(record, sort_keys=True))
    text = "\n".join(lines) + "\n"
    (out / f"{stem}_counts.jsonl").write_text(text)
    sys.stdout.write(text)
    return 0


def _decode_frames(frames_dir, labels_mode: bool, q: queue.Queue) -> None:
    """Producer: read numbered frames in order and hand them to the engine thread."""
    from .synth import read_labels

    d = Path(frames_dir)
    try:
        stems = sorted(p.stem for p in d.glob("*.ppm") if p.stem.isdigit() and len(p.stem) == 6)
        for stem in stems:
            if not (d / f"{stem}.pgm").exists():
                log.warning("frame %s has no depth map; skipped", stem)
                continue
            try:
                depth = read_pgm(d / f"{stem}.pgm").astype(np.uint16)
                if labels_mode:
                    if not (d / f"{stem}_general.pgm").exists() or not (d / f"{stem}_trans.pgm").exists():
                        log.warning("frame %s has no label maps; skipped", stem)
                        continue
                    g, t = read_labels(d, stem)
                    q.put(("labels", stem, g.astype(np.int64), t.astype(np.int64), depth))
                else:
                    rgb = read_ppm(d / f"{stem}.ppm")
                    q.put(("rgb", stem, rgb, None, depth))
            except NetpbmError as exc:
                log.warning("frame %s unreadable (%s); skipped", stem, exc)
    except Exception as exc:  # surfaced by the consumer
        q.put(("error", str(exc), None, None, None))
    finally:
        q.put(None)


def run_replay(frames_dir, cfg: RunConfig, model=None, out=None) -> list:
    """Stream frames through segmentation and the decision engine; return log lines."""
    if not Path(frames_dir).is_dir():
        raise CliError(f"frames directory {frames_dir} does not exist")
    if model is not None:
        general, trans = class_tables(model.cfg.general_classes, model.cfg.trans_classes)
    else:
        mc = cfg.model_config()
        general, trans = class_tables(mc.general_classes, mc.trans_classes)
    engine = DecisionEngine(cfg.decision_config(), general, trans)
    q: queue.Queue = queue.Queue(maxsize=QUEUE_DEPTH)
    producer = threading.Thread(target=_decode_frames, args=(frames_dir, model is None, q), daemon=True)
    producer.start()
    lines = []
    t0 = time.perf_counter()

    def emit(event):
        nonlocal t0
        now = time.perf_counter()
        line = event_log_line(event, engine.cycle_index - 1, (now - t0) * 1e3)
        t0 = now
        lines.append(line)
        if out is not None:
            out.write(line)
            out.flush()

    while True:
        item = q.get()
        if item is None:
            break
        kind, stem, a, b, depth = item
        if kind == "error":
            raise CliError(f"frame decoding failed: {stem}")
        if kind == "rgb":
            image = Tensor(np.transpose(a, (2, 0, 1)).astype(np.float32) / 255.0)
            check_input(image)
            with no_grad():
                g, t = model(image).argmax()
        else:
            g, t = a, b
        if g.shape != depth.shape:
            log.warning("frame %s: depth %s does not match labels %s; skipped", stem, depth.shape, g.shape)
            continue
        event = engine.push(g, t, depth)
        if event is not None:
            emit(event)
    producer.join()
    event = engine.flush()
    if event is not None:
        emit(event)
    return lines


def cmd_replay(args, cfg: RunConfig) -> int:
    model = None if args.labels else _load_model(cfg, args.checkpoint)
    if args.log:
        with open(args.log, "w") as fh:
            run_replay(args.frames, cfg, model, fh)
    else:
        run_replay(args.frames, cfg, model, sys.stdout)
    return 0


def cmd_metrics(args, cfg: RunConfig) -> int:
    from .metrics import count_flops, measure_latency

    mc = cfg.model_config()
    report = count_flops(mc, args.height, args.width)
    if args.latency:
        model = Trans4Trans(mc, seed=cfg.seed)
        report.latency = measure_latency(model, args.height, args.width, runs=args.latency)
    if args.jsonl:
        sys.stdout.write(report.to_jsonl(per_layer=args.per_layer))
    else:
        sys.stdout.write(report.render_text(per_layer=args.per_layer))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(cfg.seed)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{r.name:24s} rel_err={r.rel_error:.3e} {status}")
    print(f"{len(results) - failed}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_export_features(args, cfg: RunConfig) -> int:
    model = _load_model(cfg, args.checkpoint)
    image = _read_image(args.image)
    paths = export_feature_maps(image, model, args.out)
    for p in paths:
        print(p)
    return 0


# -- parser -----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--model", choices=("tiny", "small", "medium", "toy"), help="model size tag")
    p.add_argument("-v", "--verbose", action="store_true")
    for name in THRESHOLD_FLAGS:
        kind = int if name == "cycle_frames" else float
        p.add_argument(f"--{name}", f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="t4t", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RGB-D dataset")
    _common(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a frame directory and write a checkpoint")
    _common(p)
    p.add_argument("--dataset", help="directory of NNNNNN.ppm/.pgm frames with label maps")
    p.add_argument("--out", help="output directory (checkpoint, train_log.jsonl, run.cfg)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write colour-coded masks and per-class counts")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("replay", help="stream a frame directory through the decision engine")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--frames", required=True)
    p.add_argument("--labels", action="store_true",
                   help="use the NNNNNN_general/_trans.pgm maps instead of running the model")
    p.add_argument("--log", help="event log path (default: stdout)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("metrics", help="parameter / MAC report")
    _common(p)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--jsonl", action="store_true")
    p.add_argument("--latency", type=int, default=0, metavar="RUNS", help="also time RUNS forward passes (>= 10)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-features", help="write per-stage TPM feature maps as PGM")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except (CliError, ConfigError, CheckpointError, NetpbmError, FileNotFoundError) as exc:
        print(f"t4t {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"t4t {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
