"""
Shifted-window 3D attention stream.

Volumes are cut into 4x4x4 patches, then go through stages of windowed
self-attention blocks alternating regular and cyclically shifted windows,
with patch merging between stages. A last merge brings the token grid to the
same stride as the convolutional stream so both outputs can be fused cell by
cell.
"""

from functools import lru_cache
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from modalign.exceptions import InvalidInput
from modalign.volumes.transforms import pad_to_multiple

__all__ = [
    "PatchEmbedding",
    "PatchMerging",
    "SwinBlock",
    "TransformerStream",
    "WindowAttention",
    "shifted_window_mask",
    "window_partition",
    "window_reverse",
]

Triple = Tuple[int, int, int]

# added to attention logits of token pairs from different regions
MASK_VALUE = -100.0


def window_partition(x: torch.Tensor, window: Triple) -> torch.Tensor:
    """
    `[B, D, H, W, C]` to `[B * nW, wd * wh * ww, C]`, windows of one sample
    being contiguous.
    """
    wd, wh, ww = window
    return rearrange(
        x,
        "b (d wd) (h wh) (w ww) c -> (b d h w) (wd wh ww) c",
        wd=wd,
        wh=wh,
        ww=ww,
    )


def window_reverse(
    windows: torch.Tensor, window: Triple, batch: int, resolution: Triple
) -> torch.Tensor:
    wd, wh, ww = window
    d, h, w = resolution
    return rearrange(
        windows,
        "(b d h w) (wd wh ww) c -> b (d wd) (h wh) (w ww) c",
        b=batch,
        d=d // wd,
        h=h // wh,
        w=w // ww,
        wd=wd,
        wh=wh,
        ww=ww,
    )


def _axis_slices(size: int, window: int, shift: int) -> List[slice]:
    if shift == 0:
        return [slice(0, size)]
    return [
        slice(0, size - window),
        slice(size - window, size - shift),
        slice(size - shift, size),
    ]


@lru_cache(maxsize=32)
def shifted_window_mask(
    resolution: Triple, window: Triple, shift: Triple
) -> torch.Tensor:
    """
    Additive `[nW, N, N]` mask for attention over cyclically shifted windows:
    0 between tokens that were neighbours before the roll, `MASK_VALUE`
    between tokens wrapped in from the opposite side.
    """
    regions = torch.zeros(1, *resolution, 1)
    label = 0
    for d in _axis_slices(resolution[0], window[0], shift[0]):
        for h in _axis_slices(resolution[1], window[1], shift[1]):
            for w in _axis_slices(resolution[2], window[2], shift[2]):
                regions[:, d, h, w, :] = label
                label += 1

    windows = window_partition(regions, window).squeeze(-1)
    mask = windows.unsqueeze(1) - windows.unsqueeze(2)
    return mask.masked_fill(mask != 0, MASK_VALUE).masked_fill(mask == 0, 0.0)


@lru_cache(maxsize=32)
def _relative_position_index(
    window: Triple, table_window: int
) -> torch.Tensor:
    coords = torch.stack(
        torch.meshgrid(
            [torch.arange(size) for size in window],
            indexing="ij",
        )
    ).flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    relative = relative + (table_window - 1)
    span = 2 * table_window - 1
    return (
        relative[..., 0] * span * span
        + relative[..., 1] * span
        + relative[..., 2]
    )


class WindowAttention(nn.Module):
    """
    Multi-head self-attention inside windows with a learned relative
    position bias. The bias table covers `window_size` windows, smaller
    windows at coarse resolutions index into the same table.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise InvalidInput(
                f"Attention width {dim} is not divisible by {num_heads} heads"
            )
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 3, num_heads)
        )
        nn.init.trunc_normal_(self.relative_position_bias, std=0.02)

    def forward(
        self,
        x: torch.Tensor,
        window: Triple,
        mask: torch.Tensor = None,
        return_attention: bool = False,
    ):
        windows, tokens, channels = x.shape
        qkv = self.qkv(x).reshape(
            windows, tokens, 3, self.num_heads, channels // self.num_heads
        )
        q, k, v = qkv.permute(2, 0, 3, 1, 4)

        logits = (q * self.scale) @ k.transpose(-2, -1)
        index = _relative_position_index(window, self.window_size)
        bias = self.relative_position_bias[index.reshape(-1)]
        bias = bias.reshape(tokens, tokens, self.num_heads).permute(2, 0, 1)
        logits = logits + bias.unsqueeze(0)

        if mask is not None:
            count = mask.shape[0]
            logits = logits.reshape(
                windows // count, count, self.num_heads, tokens, tokens
            ) + mask.to(logits).unsqueeze(1).unsqueeze(0)
            logits = logits.reshape(windows, self.num_heads, tokens, tokens)

        attention = logits.softmax(dim=-1)
        out = (attention @ v).transpose(1, 2).reshape(windows, tokens, channels)
        out = self.proj(out)
        if return_attention:
            return out, attention
        return out


class SwinBlock(nn.Module):
    """
    Pre-norm transformer block over (optionally shifted) windows, acting on
    channel-last `[B, D, H, W, C]` grids.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: int = 2,
        shifted: bool = False,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        hidden = max(1, int(dim * mlp_ratio))
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def geometry(self, resolution: Triple) -> Tuple[Triple, Triple]:
        """
        Effective window and shift for a token grid. An axis no larger than
        the window holds a single window and is never shifted.
        """
        window = tuple(min(self.window_size, r) for r in resolution)
        for r, w in zip(resolution, window):
            if r % w:
                raise InvalidInput(
                    f"Token grid {resolution} is not divisible by the "
                    f"attention window {window}"
                )
        if self.shifted:
            shift = tuple(
                w // 2 if r > w else 0 for r, w in zip(resolution, window)
            )
        else:
            shift = (0, 0, 0)
        return window, shift

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        batch, d, h, w, _ = x.shape
        resolution = (d, h, w)
        window, shift = self.geometry(resolution)
        rolled = any(shift)

        hidden = self.norm1(x)
        mask = None
        if rolled:
            hidden = torch.roll(
                hidden, shifts=tuple(-s for s in shift), dims=(1, 2, 3)
            )
            mask = shifted_window_mask(resolution, window, shift)

        attended = self.attn(
            window_partition(hidden, window),
            window,
            mask=mask,
            return_attention=return_attention,
        )
        if return_attention:
            attended, attention = attended
        hidden = window_reverse(attended, window, batch, resolution)
        if rolled:
            hidden = torch.roll(hidden, shifts=shift, dims=(1, 2, 3))

        x = x + hidden
        x = x + self.mlp(self.norm2(x))
        if return_attention:
            return x, attention
        return x


class PatchEmbedding(nn.Module):
    def __init__(self, in_channels: int, dim: int, patch_size: int = 4):
        super().__init__()
        self.proj = nn.Conv3d(
            in_channels, dim, kernel_size=patch_size, stride=patch_size
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        tokens = rearrange(self.proj(volume), "b c d h w -> b d h w c")
        return self.norm(tokens)


class PatchMerging(nn.Module):
    """
    Halve the token grid along every axis, concatenating each 2x2x2 cell
    group and projecting to `out_dim`. Odd axes are zero-padded first.
    """

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, out_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, d, h, w, _ = x.shape
        if d % 2 or h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2, 0, d % 2))
        x = rearrange(
            x,
            "b (d p1) (h p2) (w p3) c -> b d h w (p1 p2 p3 c)",
            p1=2,
            p2=2,
            p3=2,
        )
        return self.reduction(self.norm(x))


class TransformerStream(nn.Module):
    """
    Patch embedding, `len(depths)` stages of shifted-window blocks, and the
    merges needed to reach `stride`. Returns a channel-first
    `[B, out_channels, D', H', W']` grid.
    """

    def __init__(
        self,
        in_channels: int = 1,
        dim: int = 32,
        depths: Sequence[int] = (2, 2),
        num_heads: int = 4,
        window_size: int = 2,
        patch_size: int = 4,
        out_channels: int = 64,
        stride: int = 16,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        self.stride = stride
        self.out_channels = out_channels
        self.patch_embed = PatchEmbedding(in_channels, dim, patch_size)

        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        width = dim
        reached = patch_size
        for i, depth in enumerate(depths):
            self.stages.append(
                nn.ModuleList(
                    SwinBlock(
                        width,
                        num_heads,
                        window_size=window_size,
                        shifted=j % 2 == 1,
                        mlp_ratio=mlp_ratio,
                    )
                    for j in range(depth)
                )
            )
            if i < len(depths) - 1:
                self.merges.append(PatchMerging(width, width * 2))
                width *= 2
                reached *= 2

        if reached > stride or stride % reached:
            raise InvalidInput(
                f"Patch size {patch_size} with {len(depths)} stages cannot "
                f"reach a stride of {stride}"
            )
        head = []
        while reached < stride:
            last = reached * 2 == stride
            target = out_channels if last else width * 2
            head.append(PatchMerging(width, target))
            width = target
            reached *= 2
        if not head:
            head.append(nn.Linear(width, out_channels))
        self.head = nn.Sequential(*head)

        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Conv3d):
            nn.init.kaiming_normal_(module.weight, nonlinearity="linear")
            nn.init.zeros_(module.bias)

    def forward(self, volume: torch.Tensor, return_attention: bool = False):
        x = self.patch_embed(pad_to_multiple(volume, self.stride))
        attentions = []
        for i, stage in enumerate(self.stages):
            for block in stage:
                if return_attention:
                    x, attention = block(x, return_attention=True)
                    attentions.append(attention)
                else:
                    x = block(x)
            if i < len(self.merges):
                x = self.merges[i](x)
        grid = rearrange(self.head(x), "b d h w c -> b c d h w").contiguous()
        if return_attention:
            return grid, attentions
        return grid
