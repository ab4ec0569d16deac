from typing import Dict, List, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from modalign import get_logger
from modalign.config import ModelConfig
from modalign.exceptions import UnknownModality
from modalign.vision.conv import ConvStream

__all__ = [
    "GlobalPool",
    "ModalityExpertBank",
    "VisionExpert",
    "vision_encode",
]

logger = get_logger()


class GlobalPool(nn.Module):
    """
    Spatial mean per channel, an affine map to the embedding width and L2
    normalization.
    """

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.linear = nn.Linear(channels, embed_dim)
        nn.init.zeros_(self.linear.bias)

    @staticmethod
    def pooled(grid: torch.Tensor) -> torch.Tensor:
        return grid.mean(dim=(2, 3, 4))

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.linear(self.pooled(grid)), dim=-1)


class VisionExpert(nn.Module):
    """
    A modality expert: the convolutional stream followed by global pooling.
    """

    def __init__(self, model: ModelConfig, embed_dim: int = None):
        super().__init__()
        self.conv = ConvStream(
            channels=model.conv_channels, out_channels=model.feature_channels
        )
        self.pool = GlobalPool(
            model.feature_channels, embed_dim or model.embed_dim
        )

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        return self.pool(self.conv(volume))


class ModalityExpertBank(nn.Module):
    """
    One expert per modality. Experts share their architecture but each is
    initialised and trained on its own.
    """

    def __init__(
        self,
        modalities: Sequence[str],
        model: ModelConfig,
        embed_dim: int = None,
    ):
        super().__init__()
        self.experts = nn.ModuleDict(
            {m: VisionExpert(model, embed_dim) for m in modalities}
        )

    @property
    def modalities(self) -> List[str]:
        return list(self.experts.keys())

    def __contains__(self, modality: str) -> bool:
        return modality in self.experts

    def expert(self, modality: str) -> VisionExpert:
        if modality not in self.experts:
            raise UnknownModality(modality, self.modalities)
        return self.experts[modality]

    def load_experts(self, states: Mapping[str, Dict[str, torch.Tensor]]):
        for modality, state in states.items():
            self.expert(modality).load_state_dict(state)

    def forward(self, volume: torch.Tensor, modality: str) -> torch.Tensor:
        return self.expert(modality)(volume)


def vision_encode(
    volume: torch.Tensor, modality: str, bank: ModalityExpertBank
) -> torch.Tensor:
    """
    Embed a `[B, 1, D, H, W]` batch of one modality with its expert.
    """
    return bank(volume, modality)
