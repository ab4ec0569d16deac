from dataclasses import replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from modalign import get_logger
from modalign.config import AblationFlags, FinetuneConfig
from modalign.exceptions import (
    CheckpointError,
    FrozenParameterMutated,
    InvalidInput,
    TrainingAborted,
)
from modalign.fusion.model import FusionClassifier
from modalign.objectives import (
    ScheduleState,
    bce_loss,
    kl_alignment,
    total_loss,
)
from modalign.pretrain.trainer import TEXT_COMPONENT, text_encoder_for
from modalign.text.encoders import TextEncoder
from modalign.training.checkpoint import (
    ComponentBlob,
    ModelCheckpoint,
    split_state,
)
from modalign.training.data import PreparedSplit, prepare_split
from modalign.training.metrics import MetricsReport
from modalign.utils import (
    breakup_iterable,
    parameter_norms,
    seed_everything,
    write_csv,
)
from modalign.volumes.manifest import DatasetManifest

__all__ = [
    "ABLATION_ROWS",
    "HISTORY_COLUMNS",
    "ablate",
    "build_model",
    "evaluate",
    "evaluate_prepared",
    "finetune",
    "fit",
    "model_from_checkpoint",
    "predict",
]

logger = get_logger()

HISTORY_COLUMNS = ["epoch", "loss", "val_acc", "val_auc"]

# each row adds one component on top of the previous one
ABLATION_ROWS: List[Tuple[str, AblationFlags]] = [
    ("baseline", AblationFlags(False, False, False)),
    ("+pretraining", AblationFlags(True, False, False)),
    ("+cross-attention", AblationFlags(True, True, False)),
    ("+text-modulation", AblationFlags(True, True, True)),
]


def _text_sha(encoder: TextEncoder) -> str:
    return ComponentBlob.from_state_dict(encoder.state_dict()).sha256()


def build_model(
    config: FinetuneConfig,
    modalities: Sequence[str],
    num_classes: int,
    text_dim: int,
    experts: Optional[Mapping[str, Dict[str, torch.Tensor]]] = None,
) -> FusionClassifier:
    """
    Instantiate the fine-tuning model for the given ablation flags. Expert
    weights are only copied when `use_pretrained` is set, in which case
    every modality needs one.
    """
    flags = config.ablation_flags
    model = FusionClassifier(
        modalities, num_classes, config.model, flags, text_dim
    )
    if flags.use_pretrained:
        if not experts:
            raise InvalidInput(
                "use_pretrained is set but no pretrained expert was given"
            )
        model.load_experts(experts)
    return model


def predict(
    model: FusionClassifier, data: PreparedSplit, batch_size: int = 32
) -> torch.Tensor:
    """
    `[N, K]` sigmoid probabilities of every record, in eval mode.
    """
    model.eval()
    chunks = []
    with torch.no_grad():
        for idx in breakup_iterable(list(range(len(data))), batch_size):
            out = model(
                data.volumes[idx],
                [data.modalities[i] for i in idx],
                data.text[idx],
            )
            chunks.append(out.probabilities)
    return torch.cat(chunks)


def evaluate_prepared(
    model: FusionClassifier,
    data: PreparedSplit,
    class_names: Sequence[str],
    split: str = "test",
    batch_size: int = 32,
) -> MetricsReport:
    probabilities = predict(model, data, batch_size)
    return MetricsReport.compute(
        probabilities.double().numpy(),
        data.labels.numpy().astype(np.int64),
        class_names,
        split=split,
    )


def fit(
    model: FusionClassifier,
    train: PreparedSplit,
    config: FinetuneConfig,
    encoder: TextEncoder,
    class_names: Sequence[str],
    val: Optional[PreparedSplit] = None,
    generator: Optional[torch.Generator] = None,
) -> List[Dict[str, Any]]:
    """
    Run the fine-tuning epochs on `model` in place and return the history.

    Each epoch weighs the classification and alignment terms with the
    schedule at `t = epoch`, `t_max = epochs`. The alignment term is only
    computed when text modulation is enabled. The frozen text encoder is
    checksummed after every epoch.
    """
    flags = config.ablation_flags
    generator = generator or seed_everything(config.seed)
    frozen_checksum = encoder.checksum()
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )

    history: List[Dict[str, Any]] = []
    for epoch in range(config.epochs):
        state = ScheduleState(
            epoch, config.epochs, config.schedule_base, config.schedule_decay
        )
        model.train()
        order = torch.randperm(len(train), generator=generator).tolist()
        totals = {"loss": 0.0, "bce": 0.0, "kl": 0.0}
        batches = 0
        for batch_index, idx in enumerate(
            breakup_iterable(order, config.batch_size)
        ):
            out = model(
                train.volumes[idx],
                [train.modalities[i] for i in idx],
                train.text[idx],
            )
            cls = bce_loss(out.probabilities, train.labels[idx])
            if flags.use_csa:
                kl = kl_alignment(
                    out.f_text,
                    out.f_fusion,
                    temperature=config.kl_temperature,
                    direction=config.kl_direction,
                )
            else:
                kl = torch.zeros((), dtype=cls.dtype)
            loss = total_loss(cls, kl, state)
            if not torch.isfinite(loss):
                raise TrainingAborted(
                    f"Non-finite fine-tuning loss at epoch {epoch}, "
                    f"batch {batch_index}",
                    epoch=epoch,
                    batch_index=batch_index,
                    parameter_norms=parameter_norms(model),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            totals["loss"] += loss.item()
            totals["bce"] += cls.item()
            totals["kl"] += kl.item()
            batches += 1

        actual = encoder.checksum()
        if actual != frozen_checksum:
            raise FrozenParameterMutated(
                TEXT_COMPONENT, frozen_checksum, actual
            )

        row: Dict[str, Any] = {"epoch": epoch}
        row.update({k: v / batches for k, v in totals.items()})
        row["val_acc"] = row["val_auc"] = None
        if val is not None and len(val):
            report = evaluate_prepared(model, val, class_names, split="val")
            row["val_acc"] = report.accuracy
            row["val_auc"] = report.macro_auc
        history.append(row)
        logger.info(
            f"epoch {epoch + 1}/{config.epochs}: loss {row['loss']:.6g} "
            f"bce {row['bce']:.6f} val_acc {row['val_acc']}"
        )
    return history


def finetune(
    manifest: DatasetManifest,
    config: FinetuneConfig,
    experts: Optional[Mapping[str, Dict[str, torch.Tensor]]] = None,
    text_checksums: Optional[Mapping[str, str]] = None,
    encoder: Optional[TextEncoder] = None,
    history_path: Optional[str] = None,
) -> ModelCheckpoint:
    """
    Fine-tune the fusion classifier on the `train` split of the manifest,
    tracking metrics on `val`, and pack the result as a checkpoint.

    When `text_checksums` is given, every expert must have been pretrained
    against the very text encoder used here.
    """
    model_config = config.model
    generator = seed_everything(config.seed)
    encoder = encoder or text_encoder_for(model_config)

    if text_checksums:
        expected = _text_sha(encoder)
        stale = sorted(
            m for m, sha in text_checksums.items() if sha != expected
        )
        if stale:
            raise InvalidInput(
                "Expert(s) pretrained against another text encoder: "
                f"{', '.join(stale)}"
            )

    train = prepare_split(
        manifest,
        "train",
        model_config.grid_size,
        encoder,
        max_tokens=model_config.max_tokens,
    )
    val = None
    if manifest.entries("val"):
        val = prepare_split(
            manifest,
            "val",
            model_config.grid_size,
            encoder,
            max_tokens=model_config.max_tokens,
        )
    else:
        logger.warning("Manifest has no 'val' record, skipping validation")

    model = build_model(
        config,
        manifest.modality_vocabulary,
        manifest.class_count,
        encoder.embedding_dim,
        experts,
    )
    logger.info(
        f"Fine-tuning on {len(train)} records for {config.epochs} epoch(s), "
        f"flags {config.ablation_flags.to_dict()}"
    )
    history = fit(
        model,
        train,
        config,
        encoder,
        manifest.class_names,
        val=val,
        generator=generator,
    )

    if history_path:
        write_csv(
            history_path,
            HISTORY_COLUMNS,
            [[row[c] for c in HISTORY_COLUMNS] for row in history],
        )

    components = {
        name: ComponentBlob.from_state_dict(state)
        for name, state in split_state(
            model.state_dict(), {"conv_streams": 2}
        ).items()
    }
    components[TEXT_COMPONENT] = ComponentBlob.from_state_dict(
        encoder.state_dict(), frozen=True
    )
    return ModelCheckpoint(
        components=components,
        config={
            "kind": "finetune",
            "finetune": config.to_dict(),
            "class_names": list(manifest.class_names),
            "modalities": list(manifest.modality_vocabulary),
        },
        history=history,
    )


def model_from_checkpoint(
    checkpoint: ModelCheckpoint,
) -> Tuple[FusionClassifier, TextEncoder, FinetuneConfig, List[str]]:
    """
    Rebuild the fine-tuned model and its text encoder from a checkpoint.
    The stored text encoder must match the one the config rebuilds.
    """
    if checkpoint.config.get("kind") != "finetune":
        raise InvalidInput("Checkpoint does not hold a fine-tuned model")
    config = FinetuneConfig.from_mapping(checkpoint.config["finetune"])
    class_names = list(checkpoint.config["class_names"])

    encoder = text_encoder_for(config.model)
    stored = checkpoint.component(TEXT_COMPONENT).sha256()
    if stored != _text_sha(encoder):
        raise CheckpointError(
            "Stored text encoder differs from the one the checkpoint "
            "config builds"
        )

    model = FusionClassifier(
        checkpoint.config["modalities"],
        len(class_names),
        config.model,
        config.ablation_flags,
        encoder.embedding_dim,
    )
    prefix = f"{TEXT_COMPONENT}."
    state = {
        key: tensor
        for key, tensor in checkpoint.merged_state().items()
        if not key.startswith(prefix)
    }
    try:
        model.load_state_dict(state)
    except RuntimeError as x:
        raise CheckpointError(f"Checkpoint does not fit the model: {x}")
    model.eval()
    return model, encoder, config, class_names


def evaluate(
    checkpoint: ModelCheckpoint, manifest: DatasetManifest, split: str
) -> MetricsReport:
    model, encoder, config, class_names = model_from_checkpoint(checkpoint)
    data = prepare_split(
        manifest,
        split,
        config.model.grid_size,
        encoder,
        max_tokens=config.model.max_tokens,
    )
    report = evaluate_prepared(
        model, data, class_names, split=split, batch_size=config.batch_size
    )
    logger.info(
        f"'{split}' accuracy {report.accuracy:.4f}, "
        f"macro AUC {report.macro_auc}"
    )
    return report


def ablate(
    manifest: DatasetManifest,
    experts: Mapping[str, Dict[str, torch.Tensor]],
    base_config: FinetuneConfig,
    seeds: Optional[Sequence[int]] = None,
    split: str = "test",
) -> List[Dict[str, Any]]:
    """
    Fine-tune and evaluate the four component rows, from the bare
    convolutional baseline to the full model, once per seed. Returns one
    row per configuration with the mean and sample standard deviation of
    the accuracy.
    """
    seeds = list(seeds if seeds is not None else base_config.ablation_seeds)
    if not seeds:
        raise InvalidInput("Ablation needs at least one seed")

    rows = []
    for name, flags in ABLATION_ROWS:
        accuracies = []
        for seed in seeds:
            config = replace(base_config, ablation_flags=flags, seed=seed)
            logger.info(f"Ablation row '{name}', seed {seed}")
            checkpoint = finetune(
                manifest, config, experts if flags.use_pretrained else None
            )
            accuracies.append(evaluate(checkpoint, manifest, split).accuracy)
        std = float(np.std(accuracies, ddof=1)) if len(seeds) > 1 else 0.0
        rows.append(
            {
                "row": name,
                "mean_acc": float(np.mean(accuracies)),
                "std_acc": std,
                "seeds": ";".join(str(s) for s in seeds),
                "accuracies": accuracies,
            }
        )
    return rows
