import numpy as np
import pytest
import torch

from attend_segment.model import ActiveSegmentationNet, ModelConfig
from attend_segment.retina import RetinaConfig


def make_model(num_classes=3, height=32, width=64, overview_size=0, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    model = ActiveSegmentationNet(ModelConfig(num_classes=num_classes, image_height=height,
                                              image_width=width, overview_size=overview_size))
    return model.to(dtype)


@pytest.fixture
def small_model():
    return make_model()


@pytest.fixture
def small_retina():
    return RetinaConfig(num_scales=3, glimpse_size=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_scene(rng, height=32, width=64, num_classes=3):
    image = rng.random((height, width, 3))
    label = rng.integers(0, num_classes, (height, width))
    return image, label


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
