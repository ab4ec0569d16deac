from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from modalign import get_logger
from modalign.exceptions import InvalidInput
from modalign.types import Voxels

__all__ = [
    "normalize_volume",
    "pad_to_multiple",
    "padded_shape",
    "prepare_voxels",
    "resize_volume",
    "stack_volumes",
]

logger = get_logger()


def _as_grid(voxels: Voxels, name: str = "voxels") -> np.ndarray:
    grid = np.asarray(voxels)
    if grid.ndim != 3:
        raise InvalidInput(f"{name} must be a 3D grid, got {grid.ndim}D")
    if not np.all(np.isfinite(grid)):
        raise InvalidInput(f"{name} holds non-finite values")
    return grid


def normalize_volume(voxels: Voxels) -> Voxels:
    """
    Min-max scale a grid to [0, 1]. A constant grid maps to zeros.
    """
    grid = _as_grid(voxels).astype(np.float64)
    low, high = grid.min(), grid.max()
    if high == low:
        return np.zeros(grid.shape, dtype=np.float32)
    return ((grid - low) / (high - low)).astype(np.float32)


def resize_volume(voxels: Voxels, target: Sequence[int]) -> Voxels:
    """
    Trilinear resampling with corner-aligned sampling: the eight corners of
    the output land exactly on the eight corners of the input. The result
    is clamped to the input range.
    """
    grid = _as_grid(voxels)
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise InvalidInput(f"target must be (D, H, W), got {target}")
    if any(t < 2 for t in target):
        raise InvalidInput(f"target dims must all be >= 2, got {target}")
    if target == grid.shape:
        return grid.astype(np.float32, copy=True)

    source = torch.from_numpy(grid.astype(np.float64))[None, None]
    resized = F.interpolate(
        source, size=target, mode="trilinear", align_corners=True
    )[0, 0]
    resized = resized.clamp(float(grid.min()), float(grid.max()))
    return resized.numpy().astype(np.float32)


def prepare_voxels(voxels: Voxels, grid_size: int) -> Voxels:
    """
    Bring a stored volume to the model input: a `grid_size` cube in [0, 1].
    """
    grid = _as_grid(voxels)
    if grid.shape != (grid_size,) * 3:
        grid = resize_volume(grid, (grid_size,) * 3)
    return normalize_volume(grid)


def stack_volumes(grids: Sequence[Voxels], grid_size: int) -> torch.Tensor:
    """
    Stack volumes into a `[N, 1, G, G, G]` float32 batch.
    """
    if not grids:
        raise InvalidInput("Cannot stack an empty list of volumes")
    batch = np.stack([prepare_voxels(g, grid_size) for g in grids])
    return torch.from_numpy(batch).unsqueeze(1)


def padded_shape(shape: Sequence[int], multiple: int) -> Tuple[int, ...]:
    return tuple(-(-int(s) // multiple) * multiple for s in shape)


def pad_to_multiple(volume: torch.Tensor, multiple: int) -> torch.Tensor:
    """
    Replicate-pad the trailing three dims of a `[B, C, D, H, W]` tensor up
    to the next multiple of `multiple`. Padding is added at the far end of
    each axis so feature cells keep their alignment with the origin.
    """
    if volume.dim() != 5:
        raise InvalidInput(
            f"expected a [B, C, D, H, W] tensor, got {tuple(volume.shape)}"
        )
    spatial = tuple(volume.shape[2:])
    if any(s < 2 for s in spatial):
        raise InvalidInput(f"volume dims must all be >= 2, got {spatial}")
    target = padded_shape(spatial, multiple)
    if target == spatial:
        return volume
    d, h, w = (t - s for t, s in zip(target, spatial))
    return F.pad(volume, (0, w, 0, h, 0, d), mode="replicate")
