import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
APP = os.path.join(ROOT, "AFC_Lab")
if APP not in sys.path:
    sys.path.insert(0, APP)

from class_stream.dataops import make_synthetic  # noqa: E402
from consolidation.core.network import IncrementalNet  # noqa: E402
from consolidation.lab.core.constants import preset  # noqa: E402
from consolidation.lab.core.data_models import ExperimentConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_net():
    """Two relu blocks (3, 4 channels) on 1-channel 8x8 input, three classes."""
    net = IncrementalNet(in_channels=1, channels=(3, 4), proxies_per_class=2, seed=0)
    net.grow_head(3, np.random.default_rng(0))
    return net


@pytest.fixture
def tiny_data():
    """Four classes of six 1x8x8 images each."""
    return make_synthetic(num_classes=4, per_class=6, image_size=8, seed=0, channels=1)


@pytest.fixture
def smoke_config(tmp_path):
    cfg = ExperimentConfig.from_dict(preset("smoke")["config"])
    return cfg.with_overrides({"output_dir": str(tmp_path / "run")})
