import pytest
import torch

from dualdiff.model import DenoiserConfig

TINY = dict(frames=2, latent_size=8, base_channels=8, channel_mults=(1, 2), heads=2, cond_dim=16, max_timesteps=20)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return DenoiserConfig(**TINY)
