import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from modalign import get_logger
from modalign.config import ModelConfig, PretrainConfig
from modalign.exceptions import (
    FrozenParameterMutated,
    InvalidInput,
    TrainingAborted,
)
from modalign.pretrain.losses import symmetric_loss
from modalign.text.encoders import TextEncoder, build_text_encoder
from modalign.training.checkpoint import ComponentBlob, ModelCheckpoint
from modalign.training.data import PreparedSplit, prepare_split
from modalign.utils import (
    breakup_iterable,
    parameter_norms,
    seed_everything,
    write_csv,
)
from modalign.vision.experts import VisionExpert
from modalign.volumes.manifest import DatasetManifest

__all__ = [
    "EXPERT_COMPONENT",
    "TEXT_COMPONENT",
    "embed_volumes",
    "expert_from_checkpoint",
    "load_expert_states",
    "pretrain_modality",
    "retrieval_top1",
    "text_encoder_for",
]

logger = get_logger()

EXPERT_COMPONENT = "expert"
TEXT_COMPONENT = "text_encoder"


def text_encoder_for(model: ModelConfig) -> TextEncoder:
    return build_text_encoder(
        model.text_encoder,
        vocab_size=model.text_vocab_size,
        embedding_dim=model.text_dim,
        seed=model.text_seed,
    )


def embed_volumes(
    expert: VisionExpert, volumes: torch.Tensor, batch_size: int = 64
) -> torch.Tensor:
    with torch.no_grad():
        chunks = [
            expert(volumes[idx])
            for idx in breakup_iterable(list(range(len(volumes))), batch_size)
        ]
    return torch.cat(chunks)


def retrieval_top1(
    expert: VisionExpert, prepared: PreparedSplit
) -> Tuple[float, float]:
    """
    Text to volume retrieval: for every report, is its own volume the most
    similar one among all the volumes of the set? Returns the top-1 hit
    rate and the chance level `1 / N`.
    """
    fv = embed_volumes(expert, prepared.volumes)
    ft = F.normalize(prepared.text, dim=-1)
    predicted = (ft @ fv.t()).argmax(dim=1)
    hits = (predicted == torch.arange(len(prepared))).sum().item()
    return hits / len(prepared), 1.0 / len(prepared)


def pretrain_modality(
    manifest: DatasetManifest,
    modality: str,
    config: PretrainConfig,
    encoder: Optional[TextEncoder] = None,
    loss_curve_path: Optional[str] = None,
) -> ModelCheckpoint:
    """
    Train the expert of `modality` so its volume embeddings line up with the
    frozen embeddings of their reports. Mini-batches only hold records of
    that modality, so every negative is a same-modality report.
    """
    model = config.model
    generator = seed_everything(config.seed)
    encoder = encoder or text_encoder_for(model)
    if encoder.embedding_dim != model.embed_dim:
        raise InvalidInput(
            f"Expert embeddings ({model.embed_dim}) must live in the text "
            f"space ({encoder.embedding_dim})"
        )
    frozen_checksum = encoder.checksum()

    train = prepare_split(
        manifest,
        "train",
        model.grid_size,
        encoder,
        max_tokens=model.max_tokens,
        modality=modality,
    )
    if len(train) < config.batch_size:
        raise InvalidInput(
            f"Modality '{modality}' has {len(train)} training record(s), "
            f"fewer than the batch size of {config.batch_size}"
        )
    text = F.normalize(train.text, dim=-1)

    expert = VisionExpert(model, embed_dim=encoder.embedding_dim)
    optimizer = torch.optim.AdamW(
        expert.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )

    logger.info(
        f"Pretraining expert '{modality}' on {len(train)} records for "
        f"{config.epochs} epoch(s)"
    )
    curve: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        expert.train()
        order = torch.randperm(len(train), generator=generator).tolist()
        total = 0.0
        batches = 0
        for batch_index, idx in enumerate(
            breakup_iterable(order, config.batch_size)
        ):
            fv = expert(train.volumes[idx])
            loss = symmetric_loss(fv, text[idx], config.temperature)
            if not torch.isfinite(loss):
                raise TrainingAborted(
                    f"Non-finite contrastive loss for expert '{modality}' at "
                    f"epoch {epoch}, batch {batch_index}",
                    epoch=epoch,
                    batch_index=batch_index,
                    parameter_norms=parameter_norms(expert),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
            logger.debug(
                f"'{modality}' epoch {epoch} batch {batch_index}: "
                f"loss {loss.item():.6f}"
            )
        curve.append({"epoch": epoch, "loss": total / batches})
        logger.info(
            f"'{modality}' epoch {epoch + 1}/{config.epochs}: "
            f"loss {total / batches:.6f}"
        )
        actual = encoder.checksum()
        if actual != frozen_checksum:
            raise FrozenParameterMutated(
                TEXT_COMPONENT, frozen_checksum, actual
            )

    if loss_curve_path:
        write_csv(
            loss_curve_path,
            ["epoch", "loss"],
            [[row["epoch"], repr(row["loss"])] for row in curve],
        )

    return ModelCheckpoint(
        components={
            EXPERT_COMPONENT: ComponentBlob.from_state_dict(
                expert.state_dict()
            ),
            TEXT_COMPONENT: ComponentBlob.from_state_dict(
                encoder.state_dict(), frozen=True
            ),
        },
        config={
            "kind": "expert",
            "modality": modality,
            "pretrain": config.to_dict(),
        },
        history=curve,
    )


def expert_from_checkpoint(
    checkpoint: ModelCheckpoint,
) -> Tuple[str, Dict[str, torch.Tensor], str]:
    """
    Return `(modality, expert state dict, text encoder sha256)` of an expert
    checkpoint.
    """
    if checkpoint.config.get("kind") != "expert":
        raise InvalidInput("Checkpoint does not hold a pretrained expert")
    modality = checkpoint.config["modality"]
    state = checkpoint.merged_state(EXPERT_COMPONENT)
    text_sha = checkpoint.component(TEXT_COMPONENT).sha256()
    return modality, state, text_sha


def load_expert_states(
    paths: Sequence[str],
) -> Tuple[Dict[str, Dict[str, torch.Tensor]], Dict[str, str]]:
    """
    Read expert checkpoints. `paths` may list files or directories, in
    which case every `*.ckpt` file of the directory is read. Returns the
    expert state of each modality and the text encoder checksum each one
    was trained against.
    """
    files = []
    for path in paths:
        if os.path.isdir(path):
            files.extend(
                os.path.join(path, name)
                for name in sorted(os.listdir(path))
                if name.endswith(".ckpt")
            )
        else:
            files.append(path)
    if not files:
        raise InvalidInput(f"No expert checkpoint found in {list(paths)}")

    states: Dict[str, Dict[str, torch.Tensor]] = {}
    text_checksums: Dict[str, str] = {}
    for path in files:
        checkpoint = ModelCheckpoint.read(path)
        if checkpoint.config.get("kind") != "expert":
            logger.debug(f"Skipping '{path}', not an expert checkpoint")
            continue
        modality, state, text_sha = expert_from_checkpoint(checkpoint)
        if modality in states:
            raise InvalidInput(
                f"Two expert checkpoints for modality '{modality}'"
            )
        states[modality] = state
        text_checksums[modality] = text_sha
        history = checkpoint.history
        loss = history[-1]["loss"] if history else math.nan
        logger.info(
            f"Loaded expert '{modality}' from '{path}' (final loss {loss:.6f})"
        )
    return states, text_checksums
