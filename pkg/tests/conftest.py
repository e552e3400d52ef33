import numpy as np
import pytest
import torch

from reedvae.model import LOGVAR_MIN, LatentDistribution, as_batch


class IdentityCodec:
    """Test double: the latent is the pixel grid itself, with (near) zero variance."""

    def encode(self, x):
        x = as_batch(x)
        return LatentDistribution(x.clone(), torch.full_like(x, LOGVAR_MIN))

    def decode(self, z):
        return z.clone()


@pytest.fixture
def identity_codec():
    return IdentityCodec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, summary_lines

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in summary_lines():
        terminalreporter.write_line(line)
