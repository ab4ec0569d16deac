from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from modalign import get_logger
from modalign.exceptions import InvalidInput

__all__ = ["cam_map"]

logger = get_logger()


def cam_map(
    model: nn.Module,
    volume: torch.Tensor,
    modality: str,
    class_index: int,
    text: Optional[torch.Tensor] = None,
    output_shape: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """
    Gradient-weighted activation map of one class over the final
    convolutional grid of a `[1, 1, D, H, W]` volume.

    Channel weights are the spatial mean of the gradient of the class logit
    with respect to the grid. The rectified weighted channel sum is
    upsampled by the model stride, cropped to the volume (or resized to
    `output_shape`) and scaled so its maximum is one. A map that is zero
    everywhere is returned as is.
    """
    if not 0 <= class_index < model.num_classes:
        raise InvalidInput(
            f"Class index {class_index} is out of range for "
            f"{model.num_classes} classes"
        )
    if volume.dim() != 5 or volume.shape[:2] != (1, 1):
        raise InvalidInput(
            f"cam_map expects one [1, 1, D, H, W] volume, got "
            f"{tuple(volume.shape)}"
        )

    model.eval()
    volume = volume.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = model(volume, [modality], text)
        grid = out.f_v
        (gradient,) = torch.autograd.grad(
            out.logits[0, class_index], grid, allow_unused=True
        )
    if gradient is None:
        gradient = torch.zeros_like(grid)

    weights = gradient.mean(dim=(2, 3, 4), keepdim=True)
    cam = F.relu((weights * grid.detach()).sum(dim=1, keepdim=True))

    padded: Tuple[int, ...] = tuple(s * model.stride for s in cam.shape[2:])
    cam = F.interpolate(cam, size=padded, mode="trilinear", align_corners=False)
    depth, height, width = volume.shape[2:]
    cam = cam[:, :, :depth, :height, :width]
    if output_shape is not None and tuple(output_shape) != tuple(
        cam.shape[2:]
    ):
        cam = F.interpolate(
            cam, size=tuple(output_shape), mode="trilinear", align_corners=False
        )

    cam = cam[0, 0].clamp_min(0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    else:
        logger.debug(f"Activation map of class {class_index} is all zero")
    return cam.detach()
