import json
import logging

import numpy as np
import pytest

import scenarios
from t4t import cli
from t4t.checkpoint import load_checkpoint
from t4t.gradcheck import GradResult
from t4t.netpbm import read_ppm, write_ppm


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--count", "4", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--dataset", str(root / "data"), "--out", str(root / "run"),
                     "--set", "epochs=1", "--set", "lr=3e-3"]) == 0
    return root


def strip_time(lines):
    out = []
    for line in lines:
        rec = json.loads(line)
        rec.pop("wall_time_ms")
        out.append(rec)
    return out


def test_train_writes_loadable_checkpoint(workspace):
    run = workspace / "run"
    model = load_checkpoint(run / "model.t4t")
    assert model.cfg.general_classes == 4
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 1 and "general_pixel_acc" in log[0]
    assert "epochs=1" in (run / "run.cfg").read_text()


def test_infer_is_deterministic_and_valid(workspace, capsys):
    args = ["infer", "--checkpoint", str(workspace / "run" / "model.t4t"), "--image",
            str(workspace / "data" / "000001.ppm")]
    assert cli.main(args + ["--out", str(workspace / "i1")]) == 0
    assert cli.main(args + ["--out", str(workspace / "i2")]) == 0
    for name in ("000001_general_mask.ppm", "000001_trans_mask.ppm", "000001_counts.jsonl"):
        assert (workspace / "i1" / name).read_bytes() == (workspace / "i2" / name).read_bytes()
    mask = read_ppm(workspace / "i1" / "000001_general_mask.ppm")
    palette = {tuple(c) for c in cli.GENERAL_PALETTE[:4]}
    assert {tuple(p) for p in mask.reshape(-1, 3)} <= palette
    recs = [json.loads(l) for l in (workspace / "i1" / "000001_counts.jsonl").read_text().splitlines()]
    assert [r["head"] for r in recs] == ["general", "trans"]
    assert sum(recs[0]["counts"].values()) == 32 * 32
    assert 0.0 <= recs[0]["miou"] <= 1.0  # ground truth sits next to the image


def test_infer_random_weights_gives_valid_classes(workspace, tmp_path):
    assert cli.main(["infer", "--image", str(workspace / "data" / "000002.ppm"), "--out", str(tmp_path)]) == 0
    mask = read_ppm(tmp_path / "000002_trans_mask.ppm")
    assert {tuple(p) for p in mask.reshape(-1, 3)} <= {tuple(c) for c in cli.TRANS_PALETTE[:4]}


def test_infer_bad_size_exits_nonzero(tmp_path, capsys):
    write_ppm(tmp_path / "odd.ppm", np.zeros((30, 32, 3), np.uint8))
    assert cli.main(["infer", "--image", str(tmp_path / "odd.ppm"), "--out", str(tmp_path)]) == 2
    assert "pad or crop" in capsys.readouterr().err


def test_palettes_are_fixed_sizes():
    assert len(cli.GENERAL_PALETTE) == 13 and len(cli.TRANS_PALETTE) == 12
    assert len(set(cli.GENERAL_PALETTE)) == 13 and len(set(cli.TRANS_PALETTE)) == 12


def test_replay_with_model_is_deterministic(workspace, tmp_path):
    base = ["replay", "--checkpoint", str(workspace / "run" / "model.t4t"), "--frames", str(workspace / "data"),
            "--cycle_frames", "2"]
    assert cli.main(base + ["--log", str(tmp_path / "a.jsonl")]) == 0
    assert cli.main(base + ["--log", str(tmp_path / "b.jsonl")]) == 0
    a = (tmp_path / "a.jsonl").read_text().splitlines()
    b = (tmp_path / "b.jsonl").read_text().splitlines()
    assert len(a) == 2 and strip_time(a) == strip_time(b)


@pytest.mark.parametrize("name", list(scenarios.scenario_specs()))
def test_scripted_replay(name, tmp_path):
    specs, drop, expected = scenarios.scenario_specs()[name]
    scenarios.write_frames(tmp_path / "frames", specs, drop)
    log = tmp_path / "events.jsonl"
    assert cli.main(["replay", "--labels", "--frames", str(tmp_path / "frames"), "--log", str(log)]) == 0
    recs = [json.loads(l) for l in log.read_text().splitlines()]
    assert [(r["kind"], r["class_or_direction"]) for r in recs] == expected
    assert [r["cycle_index"] for r in recs] == list(range(len(expected)))


def test_replay_skips_frames_without_depth(tmp_path, caplog):
    scenarios.write_frames(tmp_path, [scenarios.obstacle(i) for i in range(3)], drop_depth=(2,))
    with caplog.at_level(logging.WARNING):
        lines = cli.run_replay(tmp_path, cli.RunConfig())
    assert len(lines) == 1
    assert any("000002" in r.getMessage() for r in caplog.records)


def test_threshold_flags_override_config(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("theta_trans=0.7\ncycle_frames=5\n")
    args = cli.build_parser().parse_args(["replay", "--frames", ".", "--config", str(cfg_file), "--theta-trans", "0.9"])
    cfg = cli.build_config(args)
    assert cfg.theta_trans == 0.9 and cfg.cycle_frames == 5


@pytest.mark.parametrize("argv", [
    ["metrics", "--set", "nonsense"],
    ["metrics", "--set", "theta_walkable=0"],
    ["metrics", "--height", "100"],
    ["replay", "--labels", "--frames", "/no/such/dir"],
    ["train"],
    ["infer", "--image", "/no/such.ppm", "--out", "/tmp"],
    ["infer", "--checkpoint", "/no/such.t4t", "--image", "/no/such.ppm", "--out", "/tmp"],
    ["metrics", "--config", "/no/such.cfg"],
])
def test_validation_errors_exit_nonzero(argv, capsys):
    assert cli.main(argv) == 2


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code != 0


def test_metrics_output(capsys):
    assert cli.main(["metrics", "--model", "toy", "--height", "32", "--width", "32", "--jsonl"]) == 0
    first = json.loads(capsys.readouterr().out.splitlines()[0])
    assert first["record"] == "total" and first["params"] > 0


def test_export_features_cli(workspace, tmp_path):
    assert cli.main(["export-features", "--checkpoint", str(workspace / "run" / "model.t4t"),
                     "--image", str(workspace / "data" / "000001.ppm"), "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 8


def test_gradcheck_exit_status(monkeypatch, capsys):
    import t4t.gradcheck as gc

    monkeypatch.setattr(gc, "run_suite", lambda seed=0: [GradResult("ok_op", 1e-8)])
    assert cli.main(["gradcheck"]) == 0
    monkeypatch.setattr(gc, "run_suite", lambda seed=0: [GradResult("ok_op", 1e-8), GradResult("bad_op", 0.5)])
    assert cli.main(["gradcheck"]) == 1
    assert "bad_op" in capsys.readouterr().out
