import numpy as np
import pytest
import torch

from sfnerf.data import SyntheticSpec, generate_synthetic_scene
from sfnerf.geometry import Camera
from sfnerf.trainer import TrainConfig


def make_camera(height=8, width=10, f=12.0, eye=(0.0, 0.5, 3.0), near=1.0, far=5.0):
    return Camera.look_at(eye, (0, 0, 0), (0, 1, 0), f, f, width / 2, height / 2, height, width, near, far)


def tiny_config(**overrides) -> TrainConfig:
    """Small network used by the fast trainer tests."""
    base = dict(
        num_coarse=8,
        num_fine=8,
        batch_size=64,
        num_steps=5,
        field_depth=2,
        field_width=16,
        field_skip=1,
        color_width=8,
        appearance_dim=4,
        transient_dim=4,
        filter_depth=2,
        filter_width=16,
        adapter_width=8,
        backbone_dim=4,
        lr=2e-3,
        lr_final=1e-3,
        test_steps=3,
        chunk=256,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_scene():
    spec = SyntheticSpec(num_train=3, num_test=1, height=16, width=16, quadrature=256, occluders_min=1, occluders_max=2)
    return generate_synthetic_scene(spec, seed=3)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
