import json

import numpy as np
import pytest

from mmrefine.config import key_line
from mmrefine.errors import InvalidConfig
from mmrefine.pipeline import ABLATION, RunConfig, run, run_ablation, run_scene
from mmrefine.sim import load_scene, verify_manifest


def test_key_line_follows_nesting():
    text = '{\n  "a": 1,\n  "solver": {\n    "a": 2\n  }\n}'
    assert key_line(text, ("a",)) == 2
    assert key_line(text, ("solver", "a")) == 4
    assert key_line(text, ("missing",)) is None
    assert key_line(None, ("a",)) is None


def test_run_config_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg["dynamic_reconstruction"] and cfg["spurious_filter"]
    assert cfg["filter"]["d0"] == 0.5 and cfg["filter"]["percentile"] == 5.0
    assert cfg["metrics"]["delta"] == 1.0


def test_run_config_nested_merge():
    cfg = RunConfig.from_dict({"filter": {"frames": 3}})
    assert cfg["filter"]["frames"] == 3 and cfg["filter"]["d0"] == 0.5


@pytest.mark.parametrize(
    "text,line",
    [
        ('{\n  "filter": {\n    "d0": -1\n  }\n}', 3),
        ('{\n  "bogus": 1\n}', 2),
        ('{\n  "spurious_filter": "yes"\n}', 2),
        ('{\n  "cfar": {"detector": "xx"}\n}', 2),
        ('{\n  "scene": 3\n}', 2),
        ('{\n  "solver": [1]\n}', 2),
        ('{\n  "a": \n}', 3),
    ],
)
def test_run_config_errors_carry_line(text, line):
    with pytest.raises(InvalidConfig) as exc:
        RunConfig.from_text(text)
    assert exc.value.line == line


def test_with_toggles_copies():
    cfg = RunConfig.from_dict({})
    off = cfg.with_toggles(False, False)
    assert not off["dynamic_reconstruction"] and cfg["dynamic_reconstruction"]


@pytest.fixture(scope="module")
def loaded(scene_dir):
    return load_scene(scene_dir)


def test_run_scene_outputs(loaded):
    res = run_scene(loaded, RunConfig.from_dict({}))
    assert len(res["frames"]) == loaded.n_frames - 1
    agg = res["aggregate"]
    assert agg["scored_frames"] == agg["frames"]
    for key in ("rpcdl", "clutter_count", "chamfer", "modified_hausdorff"):
        assert agg[key] >= 0
    f = res["frames"][-1]
    assert f["flagged"] <= 0.1 * f["radar_points"] + 1
    assert len(f["_enhanced"]) == f["radar_points"] - f["flagged"] + f["visual_points"]


def test_modules_off_keeps_radar_cloud(loaded):
    res = run_scene(loaded, RunConfig.from_dict({"dynamic_reconstruction": False, "spurious_filter": False}))
    for f in res["frames"]:
        assert f["flagged"] == 0
        assert np.array_equal(f["_radar"].points, loaded.frames[f["frame"]].points)
    assert res["aggregate"]["spurious_recall"] is None


def test_dynamic_reconstruction_adds_object_points(loaded):
    on = run_scene(loaded, RunConfig.from_dict({"spurious_filter": False}))
    off = run_scene(loaded, RunConfig.from_dict({"spurious_filter": False, "dynamic_reconstruction": False}))
    obj_on = sum(int(np.sum(f["_enhanced"].labels > 0)) for f in on["frames"])
    obj_off = sum(int(np.sum(f["_enhanced"].labels > 0)) for f in off["frames"])
    assert obj_on > obj_off


def test_run_is_thread_count_independent(tmp_path, loaded):
    cfg = RunConfig.from_dict({})
    run(cfg, tmp_path / "a", loaded, threads=1)
    run(cfg, tmp_path / "b", loaded, threads=2)
    ma = (tmp_path / "a" / "manifest.json").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.json").read_bytes()
    assert verify_manifest(tmp_path / "a") == []


def test_run_without_scene_is_config_error(tmp_path):
    with pytest.raises(InvalidConfig):
        run(RunConfig.from_dict({}), tmp_path)


def test_run_accepts_scene_path(tmp_path, scene_dir):
    agg = run(RunConfig.from_dict({"scene": str(scene_dir)}), tmp_path)
    assert json.loads((tmp_path / "aggregate.json").read_text()) == agg


@pytest.mark.slow
def test_ablation_layout(tmp_path, loaded):
    summary = run_ablation(RunConfig.from_dict({}), tmp_path, loaded)
    assert list(summary) == [name for name, _, _ in ABLATION]
    for name, dvir, pr in ABLATION:
        assert summary[name]["dynamic_reconstruction"] == dvir and summary[name]["spurious_filter"] == pr
        assert verify_manifest(tmp_path / name) == []
    assert verify_manifest(tmp_path) == []
