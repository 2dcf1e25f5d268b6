import sys
from pathlib import Path

import numpy as np
import pytest

from v2xdg.pointcloud import AgentFrame, PointCloud, Pose, SceneFrame, save_scene
from v2xdg.toy import make_demo_scene


def random_cloud(rng, m=200, extent=(50.0, 20.0, 3.0)):
    xyz = rng.uniform(-1.0, 1.0, size=(m, 3)) * np.asarray(extent)
    inten = rng.uniform(0.0, 1.0, size=(m, 1))
    return PointCloud(np.hstack([xyz, inten]))


def write_dataset(root: Path, n_scenes=2, frames_per_scene=2, n_points=300) -> Path:
    """Scene-per-directory layout with one manifest per frame."""
    for s in range(n_scenes):
        for f in range(frames_per_scene):
            scene = make_demo_scene(seed=10 * s + f, n_agents=3, n_points=n_points, frame_id=f"s{s}_f{f}")
            save_scene(scene, root / f"scene_{s:02d}" / f"frame_{f:03d}.json")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dataset(tmp_path):
    return write_dataset(tmp_path / "data")


@pytest.fixture
def two_agent_scene(rng):
    ego = AgentFrame("ego", True, Pose(), random_cloud(rng))
    cav = AgentFrame("cav1", False, Pose(5.0, -2.0, 0.0, 0.4), random_cloud(rng))
    return SceneFrame("frame0", (ego, cav))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
