import numpy as np
import pytest

from ffpdet.config import GlobalConfig, scene_preset
from ffpdet.model import build_detector
from ffpdet.synth import generate_dataset, load_dataset


def small_config(**train) -> GlobalConfig:
    """Narrow model on small scenes; fast enough for unit tests."""
    cfg = GlobalConfig()
    cfg.ffp.channels = 32
    cfg.ffp.bottleneck = 8
    cfg.detector.head_channels = 16
    cfg.detector.tower_convs = 2
    cfg.scene = scene_preset("bogie_key", width=96, height=64)
    cfg.train.batch_size = 2
    cfg.train.iterations = 6
    cfg.train.checkpoint_every = 3
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(small_config().scene, str(root), 8, 6)
    return str(root)


@pytest.fixture(scope="session")
def tiny_test(tiny_data):
    return load_dataset(tiny_data, "test")


@pytest.fixture
def model(cfg):
    return build_detector(cfg, seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for r in sorted(RESULTS, key=lambda r: r.number):
            terminalreporter.write_line(r.line())
