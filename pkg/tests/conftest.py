import numpy as np
import pytest

from mmrefine.geometry import CameraIntrinsics
from mmrefine.sim import default_config, export, generate


@pytest.fixture
def K():
    return CameraIntrinsics(460.0, 460.0, 320.0, 240.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**overrides):
    cfg = default_config(duration=0.5, background={"points": 300}, radar={"R": 128, "D": 32})
    for o in cfg["objects"]:
        o["points"] = 60
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def small_scene():
    return generate(small_config())


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, small_scene):
    d = tmp_path_factory.mktemp("scene")
    export(small_scene, d)
    return d


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split(":")[0].split("criterion")[-1]):
            terminalreporter.write_line(line)
