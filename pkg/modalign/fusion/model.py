from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import torch
import torch.nn as nn

from modalign import get_logger
from modalign.config import AblationFlags, ModelConfig
from modalign.exceptions import InvalidInput, UnknownModality
from modalign.fusion.cross import CrossCognitionFusion
from modalign.fusion.modulation import TextGate
from modalign.text.encoders import TextEncoder, TextProjector, encode_reports
from modalign.vision.conv import ConvStream
from modalign.vision.experts import GlobalPool
from modalign.vision.swin import TransformerStream
from modalign.volumes.mvol import VolumeRecord
from modalign.volumes.transforms import stack_volumes

__all__ = [
    "FusionClassifier",
    "FusionIntermediates",
    "classify",
    "csa_forward",
]

logger = get_logger()


@dataclass
class FusionIntermediates:
    """
    Everything a forward pass computes on the way to the logits. Streams
    disabled by the ablation flags are `None`.
    """

    f_v: torch.Tensor
    f_trans: Optional[torch.Tensor]
    f_vt: Optional[torch.Tensor]
    f_text: Optional[torch.Tensor]
    f_fusion: torch.Tensor
    logits: torch.Tensor

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class FusionClassifier(nn.Module):
    """
    Fine-tuning model.

    Each modality has its own convolutional stream, initialised from its
    pretrained expert when one is given. The shifted-window stream, the
    text projector and gate, the cross-attention fusion and the head are
    shared by all modalities. Flags select the ablation variant:

    - without `use_cct` the convolutional grid is pooled straight into the
      head
    - without `use_csa` the attention stream is fused unmodulated
    """

    def __init__(
        self,
        modalities: Sequence[str],
        num_classes: int,
        model: ModelConfig,
        flags: AblationFlags,
        text_dim: int,
    ):
        super().__init__()
        if num_classes < 2:
            raise InvalidInput(f"Need at least 2 classes, got {num_classes}")
        flags.validate()
        self.modalities = list(modalities)
        self.num_classes = num_classes
        self.flags = flags

        self.conv_streams = nn.ModuleDict(
            {
                m: ConvStream(model.conv_channels, model.feature_channels)
                for m in self.modalities
            }
        )
        self.stride = model.stride

        if flags.use_cct:
            self.transformer_stream = TransformerStream(
                dim=model.swin_dim,
                depths=model.swin_depths,
                num_heads=model.num_heads,
                window_size=model.window_size,
                patch_size=model.patch_size,
                out_channels=model.feature_channels,
                stride=model.stride,
                mlp_ratio=model.mlp_ratio,
            )
            self.fusion = CrossCognitionFusion(
                model.feature_channels,
                model.embed_dim,
                layers=model.fusion_layers,
                num_heads=model.fusion_heads,
                mlp_ratio=model.mlp_ratio,
            )
        else:
            self.pool = GlobalPool(model.feature_channels, model.embed_dim)

        if flags.use_csa:
            self.projector = TextProjector(text_dim, model.embed_dim)
            self.gate = TextGate(model.embed_dim, model.feature_channels)

        self.head = nn.Linear(model.embed_dim, num_classes)

    def load_experts(
        self, states: Mapping[str, Dict[str, torch.Tensor]]
    ) -> None:
        """
        Copy the convolutional weights of pretrained experts, keyed by
        modality, into the matching streams.
        """
        missing = [m for m in self.modalities if m not in states]
        if missing:
            raise InvalidInput(
                f"No pretrained expert for modality(ies): {', '.join(missing)}"
            )
        for modality in self.modalities:
            conv_state = {
                key[len("conv.") :]: tensor
                for key, tensor in states[modality].items()
                if key.startswith("conv.")
            }
            self.conv_streams[modality].load_state_dict(conv_state)
        names = ", ".join(self.modalities)
        logger.debug(f"Initialised conv streams of {names}")

    def conv_features(
        self, volumes: torch.Tensor, modalities: Sequence[str]
    ) -> torch.Tensor:
        """
        Route each sample of a possibly mixed batch through the stream of
        its modality and put the grids back in batch order.
        """
        if len(modalities) != volumes.shape[0]:
            raise InvalidInput(
                f"{len(modalities)} modality tag(s) for a batch of "
                f"{volumes.shape[0]}"
            )
        groups: Dict[str, List[int]] = {}
        for i, modality in enumerate(modalities):
            if modality not in self.conv_streams:
                raise UnknownModality(modality, self.modalities)
            groups.setdefault(modality, []).append(i)

        if len(groups) == 1:
            (modality,) = groups
            return self.conv_streams[modality](volumes)

        order: List[int] = []
        grids = []
        for modality, indices in groups.items():
            grids.append(self.conv_streams[modality](volumes[indices]))
            order.extend(indices)
        restore = torch.argsort(torch.tensor(order))
        return torch.cat(grids)[restore]

    def forward(
        self,
        volumes: torch.Tensor,
        modalities: Sequence[str],
        text: Optional[torch.Tensor] = None,
    ) -> FusionIntermediates:
        f_v = self.conv_features(volumes, modalities)
        f_trans = f_vt = f_text = None

        if self.flags.use_cct:
            f_trans = self.transformer_stream(volumes)
            if self.flags.use_csa:
                if text is None:
                    raise InvalidInput(
                        "Text modulation needs report embeddings"
                    )
                f_text = self.projector(text)
                f_vt = self.gate(f_trans, f_text)
            else:
                f_vt = f_trans
            f_fusion = self.fusion(f_v, f_vt)
        else:
            f_fusion = self.pool(f_v)

        return FusionIntermediates(
            f_v=f_v,
            f_trans=f_trans,
            f_vt=f_vt,
            f_text=f_text,
            f_fusion=f_fusion,
            logits=classify(f_fusion, self.head),
        )


def classify(f_fusion: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return head(f_fusion)


def csa_forward(
    record: VolumeRecord,
    model: FusionClassifier,
    encoder: TextEncoder,
    grid_size: int,
    max_tokens: int = 64,
) -> FusionIntermediates:
    """
    Run one record through the model, from raw voxels and report text.
    """
    volume = stack_volumes([record.voxels], grid_size)
    text = encode_reports(encoder, [record.report], max_tokens)
    return model(volume, [record.modality], text)
