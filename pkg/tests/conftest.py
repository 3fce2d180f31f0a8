import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from ctstop.config import RunConfig  # noqa: E402
from ctstop.ct_core import Geometry  # noqa: E402
from ctstop.phantom_gen import ShapeKind, ShapeSpec, default_center, generate_phantom, radius_range  # noqa: E402
from ctstop.scan_env import RewardSpec, ScanEnvironment  # noqa: E402


@pytest.fixture
def geom32():
    return Geometry(grid=32)


@pytest.fixture
def triangle32():
    lo, hi = radius_range(ShapeKind.TRIANGLE, 32)
    spec = ShapeSpec(ShapeKind.TRIANGLE, radius=(lo + hi) / 2, rotation=10.0, center=default_center(32))
    return generate_phantom(spec, 32, phantom_id="tri-32")


@pytest.fixture
def env32(geom32):
    return ScanEnvironment(geom32, RewardSpec(cost_b=0.5), max_steps=5, sirt_iters=20)


@pytest.fixture
def small_cfg(tmp_path):
    """Grid 32, short SIRT, small network; enough for end-to-end runs in seconds."""
    cfg = RunConfig()
    cfg.geometry.grid = 32
    cfg.geometry.sirt_iters = 10
    cfg.reward.max_steps = 4
    cfg.network.channels = (4, 8)
    cfg.network.groups = 2
    cfg.train.episodes = 3
    cfg.train.n_per_shape = 2
    cfg.train.checkpoint_every = 0
    cfg.train.trace_window = 2
    cfg.eval.n_per_shape = 2
    cfg.paths.out_dir = str(tmp_path / "runs")
    cfg.validate()
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
