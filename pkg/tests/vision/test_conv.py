import pytest
import torch

from modalign.exceptions import InvalidInput
from modalign.utils import parameter_gradient_error
from modalign.vision.conv import ConvStream, group_count


def test_group_count():
    assert group_count(64) == 8
    assert group_count(16) == 4
    assert group_count(8) == 2
    assert group_count(4) == 1
    assert group_count(6) == 1


def test_default_stream_has_stride_16():
    torch.manual_seed(0)
    stream = ConvStream()
    assert stream.stride == 16
    grid = stream(torch.rand(2, 1, 32, 32, 32))
    assert grid.shape == (2, 64, 2, 2, 2)


def test_odd_volumes_are_padded():
    torch.manual_seed(0)
    stream = ConvStream(channels=(4,), out_channels=8)
    assert stream.stride == 4
    assert stream(torch.rand(1, 1, 5, 9, 4)).shape == (1, 8, 2, 3, 1)


def test_degenerate_volumes_are_refused():
    stream = ConvStream(channels=(4,), out_channels=8)
    with pytest.raises(InvalidInput):
        stream(torch.rand(1, 1, 1, 8, 8))


def test_samples_do_not_interact():
    torch.manual_seed(0)
    stream = ConvStream(channels=(4,), out_channels=8).eval()
    volumes = torch.rand(3, 1, 8, 8, 8)
    batched = stream(volumes)
    single = stream(volumes[1:2])
    assert torch.allclose(batched[1:2], single, atol=1e-6)


def test_conv_stream_gradient():
    torch.manual_seed(0)
    stream = ConvStream(channels=(4,), out_channels=4).double()
    volume = torch.rand(1, 1, 8, 8, 8, dtype=torch.float64)
    target = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)

    def loss():
        return (stream(volume) * target).sum()

    first = stream.blocks[0][0]
    assert parameter_gradient_error(loss, first.weight) < 1e-5
    assert parameter_gradient_error(loss, first.bias) < 1e-5
