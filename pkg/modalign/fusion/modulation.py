import torch
import torch.nn as nn

from modalign.exceptions import InvalidInput

__all__ = ["TextGate", "apply_gate", "text_modulate"]


def apply_gate(f_trans: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """
    Scale every channel of a `[B, C, D, H, W]` grid by its `[B, C]` gate,
    broadcast over space.
    """
    if gate.dim() != 2 or gate.shape != f_trans.shape[:2]:
        raise InvalidInput(
            f"Gate {tuple(gate.shape)} does not match the channels of "
            f"{tuple(f_trans.shape)}"
        )
    return f_trans * gate[:, :, None, None, None]


class TextGate(nn.Module):
    """
    Channel gate computed from the projected report: `1 + tanh(W t + b)`.
    Weights start at zero so the gate is exactly one at initialisation.
    """

    def __init__(self, text_dim: int, channels: int):
        super().__init__()
        self.linear = nn.Linear(text_dim, channels)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def gate(self, text: torch.Tensor) -> torch.Tensor:
        return 1.0 + torch.tanh(self.linear(text))

    def forward(
        self, f_trans: torch.Tensor, text: torch.Tensor
    ) -> torch.Tensor:
        return apply_gate(f_trans, self.gate(text))


def text_modulate(
    f_trans: torch.Tensor, text: torch.Tensor, gate: TextGate
) -> torch.Tensor:
    return gate(f_trans, text)
