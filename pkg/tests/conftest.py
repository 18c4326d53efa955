import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dagan.config import ModelConfig  # noqa: E402
from dagan.data import make_synthetic_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth16():
    return make_synthetic_dataset(16, 64, seed=0)


def grad_check_config(variant="MC"):
    """Narrow double-precision-friendly model: 4 channels everywhere."""
    return ModelConfig(variant=variant, tiny_channels=[4, 4, 4, 4, 4, 4], proj_channels=4,
                       crm_mlp_ratio=2)


def generic_point(net, seed=0):
    """Randomise BatchNorm affine parameters and running statistics.

    Freshly initialised BN has bias 0; behind a fully dead ReLU map the next
    bias-free conv outputs exact zeros, BN passes them through, and the
    following ReLU sits exactly on its kink. Autograd then returns a one-sided
    derivative and central differences the average of both sides. A gradient
    check has to run at a point where the function is differentiable.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) + 0.5)
                m.bias.copy_(0.2 * torch.randn(m.bias.shape, generator=gen))
                m.running_mean.copy_(0.2 * torch.randn(m.running_mean.shape, generator=gen))
                m.running_var.copy_(torch.rand(m.running_var.shape, generator=gen) + 0.5)
    return net
