"""
Symmetric volume/report contrastive objective: InfoNCE over in-batch
negatives in both directions, averaged.
"""

import torch
import torch.nn.functional as F

from modalign.exceptions import InvalidInput

__all__ = ["loss_t2v", "loss_v2t", "similarity_matrix", "symmetric_loss"]


def similarity_matrix(
    fv: torch.Tensor, ft: torch.Tensor, temperature: float = 0.07
) -> torch.Tensor:
    """
    `S[i, j] = <fv_i, ft_j> / temperature` for unit-norm `[N, E]` batches;
    the diagonal holds the matched pairs.
    """
    if temperature <= 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    if fv.dim() != 2 or ft.dim() != 2:
        raise InvalidInput("similarity_matrix expects two [N, E] batches")
    if fv.shape != ft.shape:
        raise InvalidInput(
            f"Volume and text batches differ: {tuple(fv.shape)} vs "
            f"{tuple(ft.shape)}"
        )
    if fv.shape[0] < 1:
        raise InvalidInput("similarity_matrix needs at least one pair")
    return fv @ ft.t() / temperature


def _targets(similarity: torch.Tensor) -> torch.Tensor:
    return torch.arange(similarity.shape[0], device=similarity.device)


def loss_v2t(similarity: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(similarity, _targets(similarity))


def loss_t2v(similarity: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(similarity.t(), _targets(similarity))


def symmetric_loss(
    fv: torch.Tensor, ft: torch.Tensor, temperature: float = 0.07
) -> torch.Tensor:
    similarity = similarity_matrix(fv, ft, temperature)
    return 0.5 * (loss_v2t(similarity) + loss_t2v(similarity))
