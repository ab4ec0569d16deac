import pytest
import torch

from modalign.exceptions import InvalidInput
from modalign.utils import parameter_gradient_error
from modalign.vision.swin import (
    MASK_VALUE,
    PatchMerging,
    SwinBlock,
    TransformerStream,
    WindowAttention,
    shifted_window_mask,
    window_partition,
    window_reverse,
)


def test_window_partition_and_reverse():
    x = torch.arange(2 * 4 * 4 * 4 * 3, dtype=torch.float32).reshape(
        2, 4, 4, 4, 3
    )
    windows = window_partition(x, (2, 2, 2))
    assert windows.shape == (16, 8, 3)
    # first window of the first sample is its 2x2x2 corner
    assert torch.equal(windows[0], x[0, :2, :2, :2].reshape(8, 3))
    assert torch.equal(window_reverse(windows, (2, 2, 2), 2, (4, 4, 4)), x)


def test_shifted_window_mask():
    mask = shifted_window_mask((4, 4, 4), (2, 2, 2), (1, 1, 1))
    assert mask.shape == (8, 8, 8)
    assert set(mask.unique().tolist()) == {0.0, MASK_VALUE}
    # windows away from the wrapped border are not masked
    assert not mask[0].any()
    # the last window mixes eight regions, a token only sees itself
    assert (mask[-1] == 0).sum() == 8


def test_unshifted_mask_is_empty():
    mask = shifted_window_mask((4, 4, 4), (2, 2, 2), (0, 0, 0))
    assert not mask.any()


def test_block_geometry():
    block = SwinBlock(8, 2, window_size=2, shifted=True)
    assert block.geometry((4, 4, 4)) == ((2, 2, 2), (1, 1, 1))
    # an axis that fits in one window is not shifted
    assert block.geometry((2, 4, 1)) == ((2, 2, 1), (0, 1, 0))
    with pytest.raises(InvalidInput):
        SwinBlock(8, 2, window_size=4).geometry((6, 6, 6))


def test_attention_rows_are_distributions():
    torch.manual_seed(0)
    block = SwinBlock(8, 2, window_size=2, shifted=True)
    out, attention = block(torch.randn(1, 4, 4, 4, 8), return_attention=True)
    assert out.shape == (1, 4, 4, 4, 8)
    assert attention.shape == (8, 2, 8, 8)
    assert torch.allclose(attention.sum(dim=-1), torch.ones(8, 2, 8))


def test_masked_pairs_get_no_attention():
    torch.manual_seed(0)
    block = SwinBlock(8, 2, window_size=2, shifted=True)
    _, attention = block(torch.randn(1, 4, 4, 4, 8), return_attention=True)
    mask = shifted_window_mask((4, 4, 4), (2, 2, 2), (1, 1, 1))
    # one sample, so windows line up with the mask
    per_head = attention.permute(1, 0, 2, 3)
    assert per_head[:, mask != 0].max() < 1e-30


def test_patch_merging_halves_the_grid():
    merge = PatchMerging(4, 6)
    assert merge(torch.randn(2, 4, 4, 4, 4)).shape == (2, 2, 2, 2, 6)
    assert merge(torch.randn(1, 3, 2, 2, 4)).shape == (1, 2, 1, 1, 6)


def test_transformer_stream_matches_the_conv_stride():
    torch.manual_seed(0)
    stream = TransformerStream(
        dim=8, depths=(1, 1), num_heads=2, out_channels=16, stride=16
    )
    grid = stream(torch.rand(2, 1, 32, 32, 32))
    assert grid.shape == (2, 16, 2, 2, 2)

    grid, attentions = stream(torch.rand(1, 1, 20, 16, 16), True)
    assert grid.shape == (1, 16, 2, 1, 1)
    assert len(attentions) == 2


def test_unreachable_stride():
    with pytest.raises(InvalidInput):
        TransformerStream(patch_size=4, depths=(1, 1, 1), stride=8)


def test_window_attention_gradient():
    torch.manual_seed(0)
    attention = WindowAttention(8, 2, window_size=2).double()
    x = torch.randn(4, 8, 8, dtype=torch.float64)
    mask = shifted_window_mask((2, 2, 4), (2, 2, 2), (1, 1, 1)).double()
    target = torch.randn(4, 8, 8, dtype=torch.float64)

    def loss():
        return (attention(x, (2, 2, 2), mask=mask) * target).sum()

    for parameter in (
        attention.qkv.weight,
        attention.proj.weight,
        attention.relative_position_bias,
    ):
        assert parameter_gradient_error(loss, parameter) < 1e-5
