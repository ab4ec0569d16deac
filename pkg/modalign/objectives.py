"""
Fine-tuning objectives: per-class binary cross-entropy, the KL term pulling
the fused embedding toward the report semantics, and the two exponential
ramps weighting them over training.

    lambda_c(t) = base * exp(-decay * (1 - t / t_max))    ramps up
    lambda_s(t) = base * exp(-decay * t / t_max)          ramps down
"""

import math
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from modalign.exceptions import InvalidInput

__all__ = [
    "BCE_EPSILON",
    "KL_DIRECTIONS",
    "ScheduleState",
    "bce_loss",
    "kl_alignment",
    "lambda_c",
    "lambda_s",
    "total_loss",
]

BCE_EPSILON = 1e-7
KL_DIRECTIONS = ("forward", "reverse")

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class ScheduleState:
    t: int
    t_max: int
    base: float = 0.1
    decay: float = 5.0

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise InvalidInput(f"t_max must be at least 1, got {self.t_max}")
        if not 0 <= self.t <= self.t_max:
            raise InvalidInput(
                f"t must lie in [0, {self.t_max}], got {self.t}"
            )

    @property
    def progress(self) -> float:
        return self.t / self.t_max


def lambda_c(state: ScheduleState) -> float:
    return state.base * math.exp(-state.decay * (1.0 - state.progress))


def lambda_s(state: ScheduleState) -> float:
    return state.base * math.exp(-state.decay * state.progress)


def bce_loss(
    probabilities: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float = BCE_EPSILON,
) -> torch.Tensor:
    """
    Mean over classes (and over the batch) of the binary cross-entropy of
    sigmoid probabilities, clamped to `[epsilon, 1 - epsilon]`.
    """
    if probabilities.shape != labels.shape:
        raise InvalidInput(
            f"Probabilities {tuple(probabilities.shape)} and labels "
            f"{tuple(labels.shape)} differ in shape"
        )
    if torch.isnan(probabilities).any() or torch.isnan(labels).any():
        raise InvalidInput("bce_loss received NaN inputs")
    p = probabilities.clamp(epsilon, 1.0 - epsilon)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def kl_alignment(
    f_text: torch.Tensor,
    f_fusion: torch.Tensor,
    temperature: float = 1.0,
    direction: str = "forward",
) -> torch.Tensor:
    """
    KL divergence between the softmax distributions of the projected text
    and of the fused embedding. The text side is a constant target: its
    gradient is cut. `forward` computes KL(text || fusion), `reverse`
    computes KL(fusion || text). Batches are averaged.
    """
    if f_text.shape != f_fusion.shape:
        raise InvalidInput(
            f"Text {tuple(f_text.shape)} and fusion "
            f"{tuple(f_fusion.shape)} embeddings differ in shape"
        )
    if temperature <= 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    if direction not in KL_DIRECTIONS:
        raise InvalidInput(
            f"Unknown KL direction '{direction}', expected one of: "
            f"{', '.join(KL_DIRECTIONS)}"
        )

    log_p = F.log_softmax(f_text.detach() / temperature, dim=-1)
    log_q = F.log_softmax(f_fusion / temperature, dim=-1)
    if direction == "forward":
        divergence = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    else:
        divergence = (log_q.exp() * (log_q - log_p)).sum(dim=-1)
    return divergence.mean()


def total_loss(cls: Scalar, kl: Scalar, state: ScheduleState) -> Scalar:
    return lambda_c(state) * cls + lambda_s(state) * kl
