"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from stuffnet.config import ModelSpec, ProposalSettings, SceneGenSpec, TrainConfig
from stuffnet.data import generate_dataset
from stuffnet.metrics import configure_logging, get_metrics_collector
from stuffnet.model import build
from stuffnet.tensor import set_deterministic


@pytest.fixture(scope="session", autouse=True)
def quiet_logging():
    """Route log events to stderr at WARNING for the whole session."""
    configure_logging("WARNING", structured=False)


@pytest.fixture(autouse=True)
def fresh_state():
    """Reset the metrics collector and the determinism flag around each test."""
    set_deterministic(True)
    get_metrics_collector().reset()
    yield
    set_deterministic(True)
    get_metrics_collector().reset()


def make_tiny_spec(variant: str = "fused", **overrides) -> ModelSpec:
    """Three-stage network small enough for finite differences."""
    values = {
        "variant": variant,
        "trunk_channels": [3, 4, 4],
        "det_subsample": 4,
        "seg_subsample": 2,
        "num_classes": 5,
        "num_seg_classes": 10,
        "roi_grid": 2,
        "rpn_hidden": 4,
        "fc_width": 6,
        "seg_hidden": 4,
        "seg_dilation": 2,
        "anchor_scales": [4.0, 8.0],
        "anchor_ratios": [1.0],
    }
    values.update(overrides)
    return ModelSpec(**values)


@pytest.fixture
def spec_factory():
    """Build tiny specs with overrides."""
    return make_tiny_spec


@pytest.fixture
def tiny_spec():
    """Fused tiny model spec matching the default scene classes."""
    return make_tiny_spec()


@pytest.fixture(params=["baseline", "multitask", "fused"])
def any_variant_spec(request):
    """Tiny spec for each variant."""
    return make_tiny_spec(request.param)


@pytest.fixture
def tiny_model(tiny_spec):
    """Built tiny fused model."""
    return build(tiny_spec, seed=0)


@pytest.fixture
def tiny_scene_spec():
    """16x16 scenes with at most two objects."""
    return SceneGenSpec(
        image_size=16,
        num_images=3,
        min_objects=1,
        max_objects=2,
        small_side=(3, 6),
        large_side=(7, 10),
        seed=0,
    )


@pytest.fixture
def tiny_dataset(tiny_scene_spec):
    """Generated tiny dataset with stuff labels."""
    return generate_dataset(tiny_scene_spec)


@pytest.fixture
def tiny_train_config():
    """A few iterations with small sampling batches."""
    return TrainConfig(
        iterations=3,
        base_lr=1e-3,
        lr_step=2,
        rpn_batch=16,
        head_batch=8,
        log_every=1,
        seed=0,
    )


@pytest.fixture
def tiny_proposals():
    """Proposal settings sized for 16x16 images."""
    return ProposalSettings(pre_nms_top=64, post_nms_top=16, min_size=1.0)


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    """Random 16x16 RGB image in [0, 1]."""
    return rng.random((3, 16, 16))
