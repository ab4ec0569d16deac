"""
Bidirectional cross-attention fusion of the convolutional grid and the
text-modulated attention grid.

Both grids are flattened to token sets carrying a sinusoidal encoding of
their 3D position. In every block the tokens of each set attend to the
tokens of the other set, the two directions running side by side. The
outputs are mean-pooled per set, concatenated and projected to the
embedding width.
"""

import math
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from modalign.exceptions import InvalidInput

__all__ = [
    "CrossAttention",
    "CrossCognitionBlock",
    "CrossCognitionFusion",
    "cct_fuse",
    "grid_positions",
    "sinusoidal_encoding",
]


def grid_positions(resolution: Tuple[int, int, int]) -> torch.Tensor:
    """
    `[D * H * W, 3]` integer cell coordinates in flattening order.
    """
    axes = [torch.arange(size, dtype=torch.float64) for size in resolution]
    return torch.stack(torch.meshgrid(axes, indexing="ij"), dim=-1).reshape(
        -1, 3
    )


def sinusoidal_encoding(positions: torch.Tensor, channels: int) -> torch.Tensor:
    """
    Fixed encoding of `[N, 3]` coordinates: each axis gets a third of the
    channels split into sine and cosine pairs, leftover channels are zero.
    """
    per_axis = (channels // 6) * 2
    encoding = torch.zeros(positions.shape[0], channels, dtype=torch.float64)
    if per_axis == 0:
        return encoding
    frequencies = torch.exp(
        -math.log(10000.0)
        * torch.arange(0, per_axis, 2, dtype=torch.float64)
        / per_axis
    )
    for axis in range(3):
        angles = positions[:, axis : axis + 1] * frequencies
        start = axis * per_axis
        encoding[:, start : start + per_axis : 2] = torch.sin(angles)
        encoding[:, start + 1 : start + per_axis : 2] = torch.cos(angles)
    return encoding


class CrossAttention(nn.Module):
    """
    Multi-head attention of `queries` over `context`, returning the output
    and the `[B, heads, Nq, Nk]` attention probabilities.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise InvalidInput(
                f"Fusion width {dim} is not divisible by {num_heads} heads"
            )
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.query = nn.Linear(dim, dim)
        self.key_value = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self, queries: torch.Tensor, context: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        q = rearrange(
            self.query(queries), "b n (h d) -> b h n d", h=self.num_heads
        )
        k, v = rearrange(
            self.key_value(context),
            "b n (two h d) -> two b h n d",
            two=2,
            h=self.num_heads,
        )
        attention = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        out = rearrange(attention @ v, "b h n d -> b n (h d)")
        return self.proj(out), attention


class CrossCognitionBlock(nn.Module):
    """
    Pre-norm block where set A attends to set B and set B attends to set A
    in parallel, each followed by its own feed-forward.
    """

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = max(1, int(dim * mlp_ratio))
        self.norm_a = nn.LayerNorm(dim)
        self.norm_b = nn.LayerNorm(dim)
        self.a_to_b = CrossAttention(dim, num_heads)
        self.b_to_a = CrossAttention(dim, num_heads)
        self.ffn_norm_a = nn.LayerNorm(dim)
        self.ffn_norm_b = nn.LayerNorm(dim)
        self.ffn_a = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )
        self.ffn_b = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, a: torch.Tensor, b: torch.Tensor):
        normed_a, normed_b = self.norm_a(a), self.norm_b(b)
        update_a, attention_ab = self.a_to_b(normed_a, normed_b)
        update_b, attention_ba = self.b_to_a(normed_b, normed_a)
        a = a + update_a
        b = b + update_b
        a = a + self.ffn_a(self.ffn_norm_a(a))
        b = b + self.ffn_b(self.ffn_norm_b(b))
        return a, b, (attention_ab, attention_ba)


class CrossCognitionFusion(nn.Module):
    def __init__(
        self,
        channels: int,
        embed_dim: int,
        layers: int = 2,
        num_heads: int = 4,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleList(
            CrossCognitionBlock(channels, num_heads, mlp_ratio)
            for _ in range(layers)
        )
        self.norm_a = nn.LayerNorm(channels)
        self.norm_b = nn.LayerNorm(channels)
        self.out = nn.Linear(2 * channels, embed_dim)
        nn.init.zeros_(self.out.bias)

    def tokens(self, grid: torch.Tensor) -> torch.Tensor:
        """
        Flatten a `[B, C, D, H, W]` grid into `[B, D*H*W, C]` tokens with
        their positional encoding added.
        """
        positions = grid_positions(tuple(grid.shape[2:]))
        encoding = sinusoidal_encoding(positions, self.channels).to(grid)
        return rearrange(grid, "b c d h w -> b (d h w) c") + encoding

    def fuse_tokens(
        self, a: torch.Tensor, b: torch.Tensor, return_attention: bool = False
    ):
        attentions: List[Tuple[torch.Tensor, torch.Tensor]] = []
        for block in self.blocks:
            a, b, maps = block(a, b)
            attentions.append(maps)
        pooled = torch.cat(
            [self.norm_a(a).mean(dim=1), self.norm_b(b).mean(dim=1)], dim=-1
        )
        fused = F.normalize(self.out(pooled), dim=-1)
        if return_attention:
            return fused, attentions
        return fused

    def forward(
        self,
        f_v: torch.Tensor,
        f_vt: torch.Tensor,
        return_attention: bool = False,
    ):
        if f_v.shape != f_vt.shape:
            raise InvalidInput(
                f"Fusion needs co-shaped grids, got {tuple(f_v.shape)} and "
                f"{tuple(f_vt.shape)}"
            )
        return self.fuse_tokens(
            self.tokens(f_v), self.tokens(f_vt), return_attention
        )


def cct_fuse(
    f_v: torch.Tensor, f_vt: torch.Tensor, fusion: CrossCognitionFusion
) -> torch.Tensor:
    return fusion(f_v, f_vt)
