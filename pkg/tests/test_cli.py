import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
from conftest import small_config

from mmrefine.cfar import RangeDopplerMatrix, write_rdm
from mmrefine.cli import main
from mmrefine.sim import verify_manifest


def _write_config(path, cfg):
    path.write_text(json.dumps(cfg, indent=2))
    return path


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write_config(d / "scene.json", small_config())
    assert main(["simulate", "--config", str(cfg), "--out", str(d / "scene")]) == 0
    return d


@pytest.fixture(scope="module")
def runs(sim_dir):
    scene = str(sim_dir / "scene")
    assert main(["run", "--scene", scene, "--out", str(sim_dir / "on")]) == 0
    assert main(["run", "--scene", scene, "--dvir", "off", "--pr", "off", "--out", str(sim_dir / "off")]) == 0
    return sim_dir / "on", sim_dir / "off"


def test_simulate_manifest_groups(sim_dir):
    m = json.loads((sim_dir / "scene" / "manifest.json").read_text())
    assert len(m["groups"]) >= 5
    assert verify_manifest(sim_dir / "scene") == []


def test_simulate_rerun_is_identical(sim_dir, tmp_path, capsys):
    assert main(["simulate", "--config", str(sim_dir / "scene.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (sim_dir / "scene" / "manifest.json").read_bytes()
    assert "frames" in capsys.readouterr().out


def test_simulate_bad_seed_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "seed": "seven"\n}\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_simulate_missing_config_is_exit_4(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "s")]) == 4


def test_simulate_unwritable_out_is_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--preset", "noise_only", "--out", str(blocker / "sub")]) == 3


def test_global_flags_before_verb(tmp_path):
    assert main(["--out", str(tmp_path / "s"), "simulate", "--preset", "static", "--seed", "3"]) == 0
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert m["seed"] == 3


def test_run_on_beats_off(runs):
    on, off = (json.loads((d / "aggregate.json").read_text()) for d in runs)
    assert on["chamfer"] < off["chamfer"]
    assert verify_manifest(runs[0]) == []


def test_run_is_idempotent(runs, sim_dir, tmp_path):
    assert main(["run", "--scene", str(sim_dir / "scene"), "--threads", "2", "--out", str(tmp_path / "on")]) == 0
    assert (tmp_path / "on" / "manifest.json").read_bytes() == (runs[0] / "manifest.json").read_bytes()


def test_run_static_scene_modules_are_near_no_ops(tmp_path):
    cfg = _write_config(tmp_path / "static.json", small_config(objects=[], spurious_fraction=0.0))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "scene")]) == 0
    out = {}
    for tog in ("on", "off"):
        assert main(["run", "--scene", str(tmp_path / "scene"), "--dvir", tog, "--pr", tog, "--out", str(tmp_path / tog)]) == 0
        out[tog] = json.loads((tmp_path / tog / "aggregate.json").read_text())["chamfer"]
    assert abs(out["on"] - out["off"]) < 0.05 * out["off"]


def test_run_missing_pose_file_is_exit_4(sim_dir, tmp_path):
    broken = tmp_path / "scene"
    shutil.copytree(sim_dir / "scene", broken)
    (broken / "poses" / "vi.csv").unlink()
    assert main(["run", "--scene", str(broken), "--out", str(tmp_path / "r")]) == 4


def test_run_without_scene_is_exit_2(tmp_path):
    assert main(["run", "--out", str(tmp_path / "r")]) == 2


def test_run_bad_config_is_exit_2(sim_dir, tmp_path):
    cfg = _write_config(tmp_path / "run.json", {"filter": {"percentile": 0}})
    assert main(["run", "--config", str(cfg), "--scene", str(sim_dir / "scene"), "--out", str(tmp_path / "r")]) == 2


def test_report_single_run_is_key_value(runs, capsys):
    assert main(["report", str(runs[0])]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split()[0] == "rpcdl" and len(lines[0].split()) == 2


def test_report_two_runs_has_two_columns(runs, tmp_path, capsys):
    assert main(["report", str(runs[0]), str(runs[1]), "--out", str(tmp_path / "rep")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["metric", "on", "off"]
    density = (tmp_path / "rep" / "density.csv").read_text().splitlines()
    assert density[0] == "method,clutter_count,rpcdl" and [r.split(",")[0] for r in density[1:]] == ["on", "off"]
    distance = (tmp_path / "rep" / "distance.csv").read_text().splitlines()
    assert distance[0] == "method,chamfer,modified_hausdorff"
    assert verify_manifest(tmp_path / "rep") == []


def test_report_missing_aggregate_is_exit_4(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 4


def test_cfar_db_sweep_is_monotone(sim_dir, tmp_path):
    assert main(["cfar", "--scene", str(sim_dir / "scene"), "--out", str(tmp_path / "c")]) == 0
    s = json.loads((tmp_path / "c" / "cfar_summary.json").read_text())["settings"]
    assert [e["offset_db"] for e in s] == [1, 2, 3, 4, 5, 6, 7, 8]
    pts = [e["points"] for e in s]
    assert all(a >= b for a, b in zip(pts, pts[1:])) and pts[0] > pts[-1]
    assert s[0]["chamfer"] is not None
    assert verify_manifest(tmp_path / "c") == []
    assert main(["report", str(tmp_path / "c")]) == 0


def test_cfar_pfa_on_noise_only(tmp_path):
    cfg = _write_config(tmp_path / "n.json", {**json.loads(json.dumps(small_config())), **{"objects": [], "background": {"points": 0}, "spurious_fraction": 0.0, "radar": {"R": 256, "D": 128}}})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "scene")]) == 0
    for det in ("ca", "os"):
        out = tmp_path / det
        args = ["cfar", "--scene", str(tmp_path / "scene"), "--mode", "pfa", "--pfa", "0.01", "--detector", det, "--out", str(out)]
        assert main(args) == 0
        rate = json.loads((out / "cfar_summary.json").read_text())["settings"][0]["alarm_rate"]
        assert 0.005 <= rate <= 0.02


def test_cfar_empty_dir_is_exit_4(tmp_path):
    (tmp_path / "rdm").mkdir()
    assert main(["cfar", "--rdm", str(tmp_path / "rdm"), "--out", str(tmp_path / "c")]) == 4


def test_cfar_missing_angle_map_is_exit_4(tmp_path):
    write_rdm(RangeDopplerMatrix(np.random.default_rng(0).exponential(size=(16, 16)), 0.2, 0.25), tmp_path / "rdm", "frame_00000")
    assert main(["cfar", "--rdm", str(tmp_path / "rdm"), "--out", str(tmp_path / "c")]) == 4


def test_cfar_window_too_large_is_exit_2(sim_dir, tmp_path):
    assert main(["cfar", "--scene", str(sim_dir / "scene"), "--train", "40", "--out", str(tmp_path / "c")]) == 2


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "mmrefine.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("simulate", "run", "cfar", "report"):
        assert verb in res.stdout
