import numpy as np
import pytest
import torch

from modalign.exceptions import InvalidInput
from modalign.volumes.transforms import (
    normalize_volume,
    pad_to_multiple,
    padded_shape,
    prepare_voxels,
    resize_volume,
    stack_volumes,
)


def test_normalize_volume_scales_to_unit_range():
    grid = np.arange(27, dtype=np.float32).reshape(3, 3, 3) * 2.0 - 5.0
    scaled = normalize_volume(grid)
    assert scaled.dtype == np.float32
    assert scaled.min() == 0.0
    assert scaled.max() == 1.0


def test_normalize_constant_volume_gives_zeros():
    assert not normalize_volume(np.full((2, 3, 4), 0.7)).any()


def test_normalize_rejects_bad_grids():
    with pytest.raises(InvalidInput):
        normalize_volume(np.zeros((4, 4)))
    grid = np.zeros((2, 2, 2))
    grid[0, 0, 0] = np.inf
    with pytest.raises(InvalidInput):
        normalize_volume(grid)


def test_resize_identity_is_a_copy():
    grid = np.random.default_rng(0).random((4, 4, 4)).astype(np.float32)
    resized = resize_volume(grid, (4, 4, 4))
    assert np.array_equal(resized, grid)
    assert resized is not grid


def test_resize_keeps_corners_and_range():
    grid = np.random.default_rng(1).random((5, 6, 7)).astype(np.float32)
    resized = resize_volume(grid, (9, 3, 12))
    assert resized.shape == (9, 3, 12)
    for d in (0, -1):
        for h in (0, -1):
            for w in (0, -1):
                assert resized[d, h, w] == pytest.approx(grid[d, h, w])
    assert resized.min() >= grid.min()
    assert resized.max() <= grid.max()


def test_resize_linear_ramp_stays_linear():
    ramp = np.broadcast_to(
        np.linspace(0.0, 1.0, 3)[:, None, None], (3, 2, 2)
    ).copy()
    resized = resize_volume(ramp, (5, 2, 2))
    assert np.allclose(resized[:, 0, 0], np.linspace(0.0, 1.0, 5))


def test_resize_rejects_degenerate_targets():
    with pytest.raises(InvalidInput):
        resize_volume(np.zeros((4, 4, 4)), (1, 4, 4))
    with pytest.raises(InvalidInput):
        resize_volume(np.zeros((4, 4, 4)), (4, 4))


def test_prepare_and_stack():
    grids = [np.random.default_rng(i).random((10, 12, 8)) for i in range(3)]
    assert prepare_voxels(grids[0], 16).shape == (16, 16, 16)
    batch = stack_volumes(grids, 16)
    assert batch.shape == (3, 1, 16, 16, 16)
    assert batch.dtype == torch.float32
    with pytest.raises(InvalidInput):
        stack_volumes([], 16)


def test_pad_to_multiple_replicates_the_far_edge():
    volume = torch.arange(2 * 3 * 5, dtype=torch.float32).reshape(
        1, 1, 2, 3, 5
    )
    padded = pad_to_multiple(volume, 4)
    assert padded.shape == (1, 1, 4, 4, 8)
    assert torch.equal(padded[..., :2, :3, :5], volume)
    assert torch.equal(padded[0, 0, 3, 2, 7], volume[0, 0, 1, 2, 4])
    assert pad_to_multiple(padded, 4) is padded


def test_pad_to_multiple_rejects_tiny_volumes():
    with pytest.raises(InvalidInput):
        pad_to_multiple(torch.zeros(1, 1, 1, 4, 4), 4)
    with pytest.raises(InvalidInput):
        pad_to_multiple(torch.zeros(1, 4, 4, 4), 4)


def test_padded_shape():
    assert padded_shape((17, 16, 1), 16) == (32, 16, 16)
