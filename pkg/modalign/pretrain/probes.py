from chaoslib.types import Configuration

from modalign import get_logger
from modalign.config import PretrainConfig
from modalign.pretrain.trainer import (
    expert_from_checkpoint,
    retrieval_top1,
    text_encoder_for,
)
from modalign.training.checkpoint import ModelCheckpoint
from modalign.training.data import prepare_split
from modalign.types import ActivityResult
from modalign.vision.experts import VisionExpert
from modalign.volumes.manifest import DatasetManifest

__all__ = ["retrieval_accuracy"]

logger = get_logger()


def retrieval_accuracy(
    checkpoint_path: str,
    manifest_path: str,
    split: str = "test",
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Text to volume top-1 retrieval of a pretrained expert over the records
    of its modality in `split`, reported with the chance level.
    """
    checkpoint = ModelCheckpoint.read(checkpoint_path)
    modality, state, _ = expert_from_checkpoint(checkpoint)
    settings = PretrainConfig.from_mapping(checkpoint.config["pretrain"])

    encoder = text_encoder_for(settings.model)
    expert = VisionExpert(settings.model, embed_dim=encoder.embedding_dim)
    expert.load_state_dict(state)
    expert.eval()

    manifest = DatasetManifest.load(manifest_path)
    prepared = prepare_split(
        manifest,
        split,
        settings.model.grid_size,
        encoder,
        max_tokens=settings.model.max_tokens,
        modality=modality,
    )
    accuracy, chance = retrieval_top1(expert, prepared)
    logger.info(
        f"Expert '{modality}' retrieval top-1 on '{split}': {accuracy:.4f} "
        f"(chance {chance:.4f})"
    )
    return {
        "modality": modality,
        "split": split,
        "records": len(prepared),
        "top1": accuracy,
        "chance": chance,
    }
