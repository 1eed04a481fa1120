"""Shared test fixtures for bevlab tests."""

from __future__ import annotations

import numpy as np
import pytest

from bevlab.config import RunConfig, SynthConfig
from bevlab.models import (
    BevGridSpec,
    Box3D,
    DepthDistribution,
    PinholeCamera,
    PointCloud,
    SceneSample,
)
from bevlab.synth import generate_scene
from bevlab.tensor import make_rng


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def grid() -> BevGridSpec:
    return BevGridSpec(origin_x=0.0, origin_y=-16.0, cell_size=1.0, height=32, width=32, channels=8)


@pytest.fixture
def two_boxes() -> list[Box3D]:
    return [
        Box3D(cx=10.0, cy=-4.0, cz=0.75, l=4.0, w=1.8, h=1.5, yaw=0.3, class_id=0),
        Box3D(cx=20.0, cy=6.0, cz=0.85, l=0.8, w=0.8, h=1.7, yaw=0.0, class_id=1),
    ]


@pytest.fixture
def small_synth() -> SynthConfig:
    """A narrow camera and coarse depth so scenes generate quickly."""
    return SynthConfig(
        min_objects=2,
        max_objects=3,
        image_width=32,
        fx=16.0,
        depth_bins=32,
        points_per_object=16,
    )


@pytest.fixture
def scene(small_synth) -> SceneSample:
    return generate_scene(small_synth, 0, seed=0)


@pytest.fixture
def in_grid_setup():
    """A 4-column camera whose every depth bin lands inside an 8x8 grid."""
    grid = BevGridSpec(origin_x=0.0, origin_y=-4.0, cell_size=1.0, height=8, width=8, channels=2)
    camera = PinholeCamera(fx=4.0, cx=2.0, width=4)
    edges = np.linspace(0.5, 7.5, 6)
    return grid, camera, edges


@pytest.fixture
def empty_scene() -> SceneSample:
    bins = 4
    return SceneSample(
        points=PointCloud.empty(8),
        image_features=np.zeros((1, 32, 4), dtype=np.float32),
        depth=DepthDistribution(np.full((1, 32, bins), 1.0 / bins), np.linspace(1.0, 33.0, bins + 1)),
        boxes=[],
        camera=PinholeCamera(fx=16.0, cx=16.0, width=32),
    )


@pytest.fixture
def run_config(tmp_path, small_synth) -> RunConfig:
    cfg = RunConfig(seed=0, threads=2, out_dir=tmp_path / "runs")
    cfg.synth = small_synth
    cfg.train.steps = 3
    cfg.train.batch_instances = 4
    cfg.train.train_scenes = 2
    cfg.train.log_every = 1
    return cfg
