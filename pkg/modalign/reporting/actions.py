import os
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from chaoslib.types import Configuration

from modalign import get_logger
from modalign.config import TSNEConfig
from modalign.exceptions import InvalidInput
from modalign.reporting.cam import cam_map
from modalign.reporting.tsne import tsne_embed
from modalign.text.encoders import encode_reports
from modalign.training.checkpoint import ModelCheckpoint
from modalign.training.data import prepare_split
from modalign.training.trainer import model_from_checkpoint
from modalign.types import ActivityResult
from modalign.utils import (
    breakup_iterable,
    configure_runtime,
    write_csv,
    write_json,
)
from modalign.vision.experts import GlobalPool
from modalign.volumes.manifest import DatasetManifest
from modalign.volumes.mvol import VolumeRecord, read_mvol, write_mvol
from modalign.volumes.transforms import stack_volumes

__all__ = ["export_cam", "export_tsne"]

logger = get_logger()

CAM_MODALITY = "CAM"
EMBEDDING_SOURCES = ("fusion", "conv")
TSNE_COLUMNS = ["id", "label", "x", "y"]


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise InvalidInput(
            "Image output needs matplotlib, install the 'viz' extra"
        )
    return plt


def export_tsne(
    checkpoint_path: str,
    manifest_path: str,
    out_path: str,
    split: str = "test",
    source: str = "fusion",
    tsne: Optional[Dict[str, Any]] = None,
    image_path: Optional[str] = None,
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Embed the features of every record of a split in 2D with t-SNE and
    write the points as CSV (`id`, `label`, `x`, `y`). `source` picks the
    fused embedding (`fusion`) or the pooled convolutional grid (`conv`).

    ```json
    {
        "type": "action",
        "name": "export-feature-map",
        "provider": {
            "type": "python",
            "module": "modalign.reporting.actions",
            "func": "export_tsne",
            "arguments": {
                "checkpoint_path": "./model.ckpt",
                "manifest_path": "./data/manifest.json",
                "out_path": "./viz/tsne.csv",
                "tsne": {"perplexity": 20}
            }
        }
    }
    ```
    """
    if source not in EMBEDDING_SOURCES:
        raise InvalidInput(
            f"Unknown embedding source '{source}', expected one of: "
            f"{', '.join(EMBEDDING_SOURCES)}"
        )
    configure_runtime(configuration)
    settings = TSNEConfig.from_mapping(tsne)
    checkpoint = ModelCheckpoint.read(checkpoint_path)
    model, encoder, config, class_names = model_from_checkpoint(checkpoint)
    manifest = DatasetManifest.load(manifest_path)
    data = prepare_split(
        manifest,
        split,
        config.model.grid_size,
        encoder,
        max_tokens=config.model.max_tokens,
    )

    features: List[torch.Tensor] = []
    with torch.no_grad():
        for idx in breakup_iterable(list(range(len(data))), 32):
            out = model(
                data.volumes[idx],
                [data.modalities[i] for i in idx],
                data.text[idx],
            )
            if source == "fusion":
                features.append(out.f_fusion)
            else:
                features.append(GlobalPool.pooled(out.f_v))
    embeddings = torch.cat(features).double().numpy()

    result = tsne_embed(embeddings, settings)
    labels = [class_names[k] for k in data.targets.tolist()]
    write_csv(
        out_path,
        TSNE_COLUMNS,
        [
            [record_id, label, repr(float(x)), repr(float(y))]
            for record_id, label, (x, y) in zip(
                data.ids, labels, result.embedding
            )
        ],
    )

    if image_path:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(6, 6))
        for name in class_names:
            mask = np.array([label == name for label in labels])
            if mask.any():
                ax.scatter(*result.embedding[mask].T, s=12, label=name)
        ax.legend(fontsize="small")
        ax.set_title(f"{source} features, '{split}' split")
        fig.savefig(image_path, dpi=120, bbox_inches="tight")
        plt.close(fig)

    return {
        "points": out_path,
        "records": len(data),
        "source": source,
        "kl_after_exaggeration": result.kl_after_exaggeration,
        "kl_final": result.kl_final,
        "image": image_path,
    }


def export_cam(
    checkpoint_path: str,
    volume_path: str,
    out_path: str,
    class_index: Optional[int] = None,
    image_path: Optional[str] = None,
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Compute the activation map of a class over one MVOL volume and save it
    as an MVOL file tagged `CAM`, at the resolution of the input volume,
    with the resolved settings of the run next to it. The predicted class
    is used when `class_index` is not given.
    """
    configure_runtime(configuration)
    checkpoint = ModelCheckpoint.read(checkpoint_path)
    model, encoder, config, class_names = model_from_checkpoint(checkpoint)
    record = read_mvol(volume_path)

    volume = stack_volumes([record.voxels], config.model.grid_size)
    text = encode_reports(encoder, [record.report], config.model.max_tokens)
    if class_index is None:
        with torch.no_grad():
            out = model(volume, [record.modality], text)
        class_index = int(out.logits.argmax(dim=1).item())
        logger.info(f"Mapping predicted class '{class_names[class_index]}'")

    cam = cam_map(
        model,
        volume,
        record.modality,
        class_index,
        text=text,
        output_shape=record.shape,
    )
    voxels = cam.double().numpy().astype(np.float32)

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    write_mvol(
        VolumeRecord(
            id=f"{record.id}-cam",
            modality=CAM_MODALITY,
            voxels=voxels,
            report=f"activation map of {class_names[class_index]}",
            labels=record.labels,
            split=record.split,
        ),
        out_path,
    )
    write_json(
        f"{os.path.splitext(out_path)[0]}-resolved-config.json",
        {
            "checkpoint_path": checkpoint_path,
            "volume_path": volume_path,
            "class_index": class_index,
            "finetune": config.to_dict(),
        },
    )

    if image_path:
        plt = _pyplot()
        peak_slice = int(voxels.sum(axis=(1, 2)).argmax())
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(record.voxels[peak_slice], cmap="gray")
        ax.imshow(voxels[peak_slice], cmap="jet", alpha=0.4, vmin=0, vmax=1)
        ax.set_title(f"{record.id}: {class_names[class_index]}")
        ax.axis("off")
        fig.savefig(image_path, dpi=120, bbox_inches="tight")
        plt.close(fig)

    return {
        "cam": out_path,
        "class_index": class_index,
        "class_name": class_names[class_index],
        "shape": list(voxels.shape),
        "image": image_path,
    }
