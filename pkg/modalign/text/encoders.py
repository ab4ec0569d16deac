"""
Text side of the pipeline: a frozen report encoder and the trainable
projection that brings its output into the shared embedding space.

Encoders are looked up by name in `TEXT_ENCODERS` so a heavier pretrained
model can be registered without touching the training code. Whatever the
implementation, an encoder is built deterministically from its seed and
never receives a gradient.
"""

import math
from typing import Callable, Dict, List, Sequence

import torch
import torch.nn as nn

from modalign import get_logger
from modalign.exceptions import DegenerateProjection, InvalidInput
from modalign.text.tokenizer import TokenSequence, tokenize
from modalign.utils import state_sha256

__all__ = [
    "TEXT_ENCODERS",
    "TextEncoder",
    "TextProjector",
    "TokenBagEncoder",
    "build_text_encoder",
    "encode_reports",
    "encode_text",
    "project_text",
    "register_text_encoder",
]

logger = get_logger()

# projected vectors shorter than this cannot be normalized
DEGENERATE_NORM = 1e-12


class TextEncoder(nn.Module):
    """
    Contract for frozen report encoders: `forward(ids, mask)` maps a padded
    `[N, L]` batch of token ids to `[N, embedding_dim]` embeddings.
    """

    vocab_size: int
    embedding_dim: int

    def freeze(self) -> "TextEncoder":
        self.requires_grad_(False)
        self.eval()
        return self

    def checksum(self) -> str:
        return state_sha256(self.state_dict())

    def encode(self, tokens: TokenSequence) -> torch.Tensor:
        return self.encode_batch([tokens])[0]

    def encode_batch(self, sequences: Sequence[TokenSequence]) -> torch.Tensor:
        if not sequences:
            raise InvalidInput("Cannot encode an empty batch of reports")
        for sequence in sequences:
            if any(not 0 <= i < self.vocab_size for i in sequence.ids):
                raise InvalidInput(
                    f"Token id out of range [0, {self.vocab_size})"
                )
        width = max(len(s) for s in sequences)
        ids = torch.zeros(len(sequences), width, dtype=torch.long)
        mask = torch.zeros(len(sequences), width, dtype=torch.bool)
        for row, sequence in enumerate(sequences):
            ids[row, : len(sequence)] = torch.tensor(sequence.ids)
            mask[row, : len(sequence)] = True
        with torch.no_grad():
            return self(ids, mask)


class TokenBagEncoder(TextEncoder):
    """
    Mean of token embeddings, then a dense layer and tanh.
    """

    def __init__(
        self, vocab_size: int = 8192, embedding_dim: int = 128, seed: int = 1234
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.embedding = nn.Embedding(vocab_size, embedding_dim)
        self.dense = nn.Linear(embedding_dim, embedding_dim)

        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.embedding.weight.copy_(
                torch.randn(vocab_size, embedding_dim, generator=generator)
            )
            self.dense.weight.copy_(
                torch.randn(embedding_dim, embedding_dim, generator=generator)
                / math.sqrt(embedding_dim)
            )
            self.dense.bias.zero_()
        self.freeze()

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # sorting makes the sum order, hence the bits, independent of the
        # token order; padding (id 0, masked) sorts first and adds nothing
        ids, order = torch.sort(ids.masked_fill(~mask, 0), dim=1)
        mask = torch.gather(mask, 1, order)
        vectors = self.embedding(ids) * mask.unsqueeze(-1)
        counts = mask.sum(dim=1, keepdim=True).clamp(min=1)
        mean = vectors.sum(dim=1) / counts
        return torch.tanh(self.dense(mean))


TEXT_ENCODERS: Dict[str, Callable[..., TextEncoder]] = {
    "token-bag": TokenBagEncoder,
}


def register_text_encoder(
    name: str, factory: Callable[..., TextEncoder]
) -> None:
    """
    Make another frozen encoder available under `name`. The factory is
    called with `vocab_size`, `embedding_dim` and `seed`.
    """
    TEXT_ENCODERS[name] = factory


def build_text_encoder(
    name: str = "token-bag",
    vocab_size: int = 8192,
    embedding_dim: int = 128,
    seed: int = 1234,
) -> TextEncoder:
    factory = TEXT_ENCODERS.get(name)
    if factory is None:
        raise InvalidInput(
            f"Unknown text encoder '{name}', expected one of: "
            f"{', '.join(sorted(TEXT_ENCODERS))}"
        )
    encoder = factory(
        vocab_size=vocab_size, embedding_dim=embedding_dim, seed=seed
    )
    return encoder.freeze()


def encode_text(encoder: TextEncoder, tokens: TokenSequence) -> torch.Tensor:
    return encoder.encode(tokens)


def encode_reports(
    encoder: TextEncoder, reports: Sequence[str], max_len: int = 64
) -> torch.Tensor:
    """
    Tokenize and encode a list of reports into a `[N, E_t]` tensor.
    """
    sequences: List[TokenSequence] = [
        tokenize(r, max_len=max_len, vocab_size=encoder.vocab_size)
        for r in reports
    ]
    return encoder.encode_batch(sequences)


class TextProjector(nn.Module):
    """
    Trainable affine map from the text encoder space to the shared
    embedding space, followed by L2 normalization.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        nn.init.zeros_(self.linear.bias)

    @classmethod
    def identity(cls, dim: int) -> "TextProjector":
        projector = cls(dim, dim)
        with torch.no_grad():
            projector.linear.weight.copy_(torch.eye(dim))
        return projector

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if not torch.all(torch.isfinite(embedding)):
            raise InvalidInput("Text embedding holds non-finite values")
        projected = self.linear(embedding)
        norms = projected.norm(dim=-1, keepdim=True)
        if bool((norms <= DEGENERATE_NORM).any()):
            raise DegenerateProjection(
                "Projected text vector has zero norm and cannot be "
                "normalized"
            )
        return projected / norms


def project_text(
    projector: TextProjector, embedding: torch.Tensor
) -> torch.Tensor:
    return projector(embedding)
