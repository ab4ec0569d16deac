from typing import Sequence

import torch
import torch.nn as nn

from modalign.volumes.transforms import pad_to_multiple

__all__ = ["ConvBlock", "ConvStream", "group_count"]


def group_count(channels: int, max_groups: int = 8) -> int:
    """
    Largest number of GroupNorm groups, at most `max_groups`, leaving at
    least four channels per group. Falls back to a single group.
    """
    for groups in range(max_groups, 0, -1):
        if channels % groups == 0 and channels // groups >= 4:
            return groups
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv3d(
                in_channels, out_channels, kernel_size=3, stride=2, padding=1
            ),
            nn.GroupNorm(group_count(out_channels), out_channels),
            nn.SiLU(),
        )


class ConvStream(nn.Module):
    """
    Stack of stride-2 3D convolution blocks extracting local features. With
    the default widths the stream has four blocks and a total stride of 16.

    Inputs are replicate-padded to a multiple of the stride, so any volume
    with every dim >= 2 is accepted and a `D`-deep volume comes out
    `ceil(D / 16)` cells deep.
    """

    def __init__(
        self,
        channels: Sequence[int] = (16, 32, 64),
        out_channels: int = 64,
        in_channels: int = 1,
    ):
        super().__init__()
        widths = [*channels, out_channels]
        blocks = []
        previous = in_channels
        for width in widths:
            blocks.append(ConvBlock(previous, width))
            previous = width
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = out_channels
        self.stride = 2 ** len(widths)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Conv3d):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        return self.blocks(pad_to_multiple(volume, self.stride))
