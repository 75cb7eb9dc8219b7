# tests/conftest.py
from __future__ import annotations

import os

import numpy as np
import pytest

from t3d.data import generate_dataset
from t3d.schemas import ArchSpec, PoolSpec, SamplerConfig, StageSpec, StemSpec, SyntheticVideoSpec, TrainConfig
from t3d.settings import reset_settings


def pytest_collection_modifyitems(config, items):
    if os.getenv("T3D_RUN_SLOW", "0").strip() == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale run; set T3D_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def runs_dir(tmp_path, monkeypatch):
    """Every test writes its artifacts under its own tmp dir."""
    path = tmp_path / "runs"
    monkeypatch.setenv("T3D_RUNS_DIR", str(path))
    reset_settings()
    yield path
    reset_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def video_spec():
    return SyntheticVideoSpec(count=16, frame_size=16, num_frames=8, object_size=4, val_fraction=0.5)


@pytest.fixture
def sampler():
    return SamplerConfig(clip_len=4, stride=1, resize_short_side=None, crop_size=16, num_crops=5)


@pytest.fixture
def store(tmp_path, video_spec):
    return generate_dataset(video_spec, root=tmp_path / "store")


@pytest.fixture
def micro_spec():
    """Smallest network that still has a TTL, a plain block and a classifier."""
    return ArchSpec(
        name="micro-t3d",
        growth=2,
        bottleneck_factor=2,
        stem=StemSpec(
            channels=4,
            spatial=3,
            temporal=3,
            stride=(1, 2, 2),
            pool=PoolSpec(mode="max", kernel=(1, 2, 2), stride=(1, 2, 2)),
        ),
        stages=[StageSpec(layers=1, transition="ttl", depths=(1, 2)), StageSpec(layers=1)],
        num_classes=8,
        input_shape=(3, 4, 16, 16),
    )


@pytest.fixture
def quick_train():
    return TrainConfig(lr0=0.05, batch_size=4, max_epochs=1, quiet=True)
