import csv
import json
import subprocess
import sys

import pytest

from adlift.cli import main
from adlift.lpgd import TrainLog
from adlift.render import render
from adlift.scene import bundled_cameras, bundled_scene, load_cameras, load_scene, split_train_novel
from adlift.surrogate import AttackObjective, Surrogates, adv_loss

FAST = ["--iters", "8", "--kl", "5", "--kp", "3"]


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("inputs")
    assert main(["gen-scene", "--n", "50", "--seed", "7", "--out", str(d)]) == 0
    return d / "scene.json", d / "cameras.json"


def _io(inputs, out):
    return ["--scene", str(inputs[0]), "--cams", str(inputs[1]), "--out", str(out)]


def test_gen_scene_matches_bundled(inputs):
    assert load_scene(inputs[0]) == bundled_scene()
    assert load_cameras(inputs[1]) == bundled_cameras()


def test_gen_scene_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-scene", "--n", "5", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    for f in ("scene.json", "cameras.json", "config.resolved"):
        a = (tmp_path / "a" / f).read_bytes()
        b = (tmp_path / "b" / f).read_bytes()
        if f == "config.resolved":
            a, b = a.replace(b"/a", b""), b.replace(b"/b", b"")
        assert a == b


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["protect", "--scene", "x.json"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path, capsys):
    code = main(["protect", "--scene", str(tmp_path / "nope.json"), "--cams", str(tmp_path / "c.json"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "no such file" in capsys.readouterr().err


def test_malformed_scene_exits_2(tmp_path, inputs):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "raw": [[1, 2')
    assert main(["render", "--scene", str(bad), "--cams", str(inputs[1]), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_exits_3(tmp_path, inputs, capsys):
    code = main(["protect", *_io(inputs, tmp_path), "--iters", "2", "--kl", "3", "--beta", "1e308"])
    assert code == 3
    assert "numerical" in capsys.readouterr().err


def test_protect_smoke_and_rerun_identical(tmp_path, inputs):
    for d in ("a", "b"):
        assert main(["protect", *_io(inputs, tmp_path / d), "--objective", "vu", "--eta", "0.0314", *FAST]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for f in ("protected.json", "trainlog.jsonl", "report.json", "config.resolved"):
        assert (a / f).is_file()
    assert (a / "protected.json").read_bytes() == (b / "protected.json").read_bytes()
    assert (a / "trainlog.jsonl").read_bytes() == (b / "trainlog.jsonl").read_bytes()
    report = json.loads((a / "report.json").read_text())
    assert report["gap"] is not None
    assert len(TrainLog.from_jsonl((a / "trainlog.jsonl").read_text())) == 8


def test_config_resolved_reproduces_run(tmp_path, inputs):
    assert main(["protect", *_io(inputs, tmp_path / "a"), *FAST, "--eta", "0.02"]) == 0
    cfg = json.loads((tmp_path / "a" / "config.resolved").read_text())
    assert cfg["eta"] == 0.02 and cfg["iters"] == 8
    cfg["out"] = str(tmp_path / "b")
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["protect", "--config", str(tmp_path / "cfg.json")]) == 0
    assert (tmp_path / "a" / "protected.json").read_bytes() == (tmp_path / "b" / "protected.json").read_bytes()


def test_flags_override_config_file(tmp_path, inputs):
    (tmp_path / "cfg.json").write_text(json.dumps({"eta": 0.05, "iters": 3}))
    assert main(["protect", "--config", str(tmp_path / "cfg.json"), *_io(inputs, tmp_path / "o"),
                 "--kl", "2", "--iters", "2"]) == 0
    cfg = json.loads((tmp_path / "o" / "config.resolved").read_text())
    assert (cfg["eta"], cfg["iters"], cfg["kl"], cfg["kp"]) == (0.05, 2, 2, 10)


def test_unknown_config_key_exits_2(tmp_path, inputs):
    (tmp_path / "cfg.json").write_text(json.dumps({"etaa": 0.05}))
    with pytest.raises(SystemExit) as exc:
        main(["protect", "--config", str(tmp_path / "cfg.json"), *_io(inputs, tmp_path / "o")])
    assert exc.value.code == 2


def test_warm_start_begins_from_fit2d_output(tmp_path, inputs):
    common = ["--iters", "6", "--kl", "10", "--kp", "5"]
    assert main(["protect", *_io(inputs, tmp_path / "warm"), *common, "--variant", "adlift-star"]) == 0
    assert main(["baseline", *_io(inputs, tmp_path / "fit"), *common, "--kind", "fit2d"]) == 0
    warm = TrainLog.from_jsonl((tmp_path / "warm" / "trainlog.jsonl").read_text())
    donor = load_scene(tmp_path / "fit" / "protected.json")
    train, _ = split_train_novel(load_cameras(inputs[1]))
    scene = load_scene(inputs[0])
    raw = render(scene, train[0])
    start = adv_loss(AttackObjective.vu(), Surrogates.from_seed(0), render(donor, train[0]), raw)[0]
    assert warm.records[0].adv_before == start


def test_baseline_then_eval(tmp_path, inputs):
    assert main(["baseline", *_io(inputs, tmp_path / "b"), "--kind", "fit2d", *FAST]) == 0
    prot = tmp_path / "b" / "protected.json"
    assert main(["eval", "--scene", str(prot), "--cams", str(inputs[1]), "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["gap"] is not None
    assert rep["config"]["objective"]["kind"] == "vu"


def test_soft_baseline_writes_tradeoff(tmp_path, inputs):
    assert main(["baseline", *_io(inputs, tmp_path), "--kind", "soft", "--soft-w", "0.5", "--soft-steps", "4"]) == 0
    lines = (tmp_path / "tradeoff.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["step"] == 0


def test_render_writes_one_ppm_and_lgim_per_camera(tmp_path, inputs):
    assert main(["render", *_io(inputs, tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.ppm"))) == 8
    assert len(list(tmp_path.glob("*.lgim"))) == 8


def test_sweep_csv_rows(tmp_path, inputs):
    assert main(["sweep", *_io(inputs, tmp_path), "--axis", "eta", "--values", "0.0157,0.0314,0.0627",
                 "--iters", "2", "--kl", "2", "--kp", "2"]) == 0
    rows = list(csv.reader((tmp_path / "scatter.csv").open()))
    assert len(rows) == 4
    assert json.loads((tmp_path / "sweep.json").read_text())["axis"] == "eta"


def test_st_and_vt_objectives(tmp_path, inputs):
    assert main(["render", *_io(inputs, tmp_path / "r")]) == 0
    target = tmp_path / "r" / "view_003.lgim"
    assert main(["protect", *_io(inputs, tmp_path / "vt"), "--objective", "vt", "--target-image", str(target),
                 "--iters", "2", "--kl", "2", "--kp", "2"]) == 0
    assert main(["protect", *_io(inputs, tmp_path / "st"), "--objective", "st", "--box", "2,2,4,4",
                 "--iters", "2", "--kl", "2", "--kp", "2"]) == 0
    assert main(["protect", *_io(inputs, tmp_path / "bad"), "--objective", "vt"]) == 2
    assert main(["protect", *_io(inputs, tmp_path / "bad"), "--objective", "st", "--box", "9,9,4,4"]) == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "adlift.cli", "gen-scene", "--n", "3", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0
    r = subprocess.run([sys.executable, "-m", "adlift.cli", "render"], capture_output=True, text=True)
    assert r.returncode == 2
