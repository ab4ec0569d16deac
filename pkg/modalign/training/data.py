from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch

from modalign import get_logger
from modalign.exceptions import InvalidInput
from modalign.text.encoders import TextEncoder, encode_reports
from modalign.volumes.manifest import DatasetManifest
from modalign.volumes.mvol import VolumeRecord
from modalign.volumes.transforms import stack_volumes

__all__ = ["PreparedSplit", "prepare_records", "prepare_split"]

logger = get_logger()


@dataclass
class PreparedSplit:
    """
    Model-ready tensors for a list of records, in record order.
    """

    ids: List[str]
    modalities: List[str]
    volumes: torch.Tensor
    labels: torch.Tensor
    text: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def targets(self) -> torch.Tensor:
        return self.labels.argmax(dim=1)

    def select(self, indices: Sequence[int]) -> "PreparedSplit":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return PreparedSplit(
            ids=[self.ids[i] for i in index.tolist()],
            modalities=[self.modalities[i] for i in index.tolist()],
            volumes=self.volumes[index],
            labels=self.labels[index],
            text=self.text[index],
        )


def prepare_records(
    records: Sequence[VolumeRecord],
    grid_size: int,
    encoder: TextEncoder,
    max_tokens: int = 64,
) -> PreparedSplit:
    if not records:
        raise InvalidInput("No record to prepare")
    return PreparedSplit(
        ids=[r.id for r in records],
        modalities=[r.modality for r in records],
        volumes=stack_volumes([r.voxels for r in records], grid_size),
        labels=torch.tensor([r.labels for r in records], dtype=torch.float32),
        text=encode_reports(encoder, [r.report for r in records], max_tokens),
    )


def prepare_split(
    manifest: DatasetManifest,
    split: str,
    grid_size: int,
    encoder: TextEncoder,
    max_tokens: int = 64,
    modality: Optional[str] = None,
) -> PreparedSplit:
    records = manifest.load_records(split=split, modality=modality)
    if not records:
        suffix = f" for modality '{modality}'" if modality else ""
        raise InvalidInput(f"Split '{split}' has no record{suffix}")
    logger.debug(f"Prepared {len(records)} '{split}' record(s)")
    return prepare_records(records, grid_size, encoder, max_tokens)
