import pytest
import torch

import fd
from dagan.discriminator import Discriminator


def test_exactly_four_conv_layers():
    d = Discriminator()
    convs = [m for m in d.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 4
    assert [c.out_channels for c in convs] == [32, 64, 128, 256]
    assert all(c.stride == (2, 2) and c.kernel_size == (3, 3) for c in convs)
    with pytest.raises(ValueError):
        Discriminator(channels=(8, 8, 8))


def test_output_open_interval():
    d = Discriminator()
    out = d(torch.rand(5, 1, 64, 64))
    assert out.shape == (5,)
    assert (out > 0).all() and (out < 1).all()


def test_zero_head_gives_half():
    d = Discriminator()
    with torch.no_grad():
        d.head.weight.zero_()
        d.head.bias.zero_()
    assert torch.equal(d(torch.rand(3, 1, 32, 32)), torch.full((3,), 0.5))


def test_rejects_small_input():
    with pytest.raises(ValueError):
        Discriminator()(torch.rand(1, 1, 4, 8))


def test_conditional_takes_images():
    d = Discriminator(conditional=True)
    assert d.convs[0].in_channels == 7
    m, a, b = torch.rand(2, 1, 32, 32), torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    assert d(m, a, b).shape == (2,)
    with pytest.raises(ValueError):
        d(m)


def test_gradients():
    d = Discriminator(channels=(4, 4, 4, 4)).double()
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    assert fd.check(lambda: d(x).sum(), [x] + list(d.parameters())) < 1e-4
