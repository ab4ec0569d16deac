import os
from typing import Any, Dict, List, Optional

from chaoslib.types import Configuration

from modalign import get_logger
from modalign.config import PretrainConfig
from modalign.pretrain.trainer import pretrain_modality
from modalign.types import ActivityResult
from modalign.utils import configure_runtime, write_json
from modalign.volumes.manifest import DatasetManifest

__all__ = ["pretrain_expert"]

logger = get_logger()


def pretrain_expert(
    manifest_path: str,
    modality: str,
    out_path: str,
    config: Optional[Dict[str, Any]] = None,
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Pretrain the vision expert of one modality against the frozen report
    encoder and save it as a checkpoint. The loss curve is written as
    `<out_path stem>-loss-curve.csv` next to the checkpoint, together with
    the resolved config.

    ```json
    {
        "type": "action",
        "name": "pretrain-t1-expert",
        "provider": {
            "type": "python",
            "module": "modalign.pretrain.actions",
            "func": "pretrain_expert",
            "arguments": {
                "manifest_path": "./data/manifest.json",
                "modality": "T1",
                "out_path": "./experts/T1.ckpt"
            }
        }
    }
    ```
    """
    configure_runtime(configuration)
    settings = PretrainConfig.from_mapping(config)
    manifest = DatasetManifest.load(manifest_path)

    stem = os.path.splitext(out_path)[0]
    curve_path = f"{stem}-loss-curve.csv"
    checkpoint = pretrain_modality(
        manifest, modality, settings, loss_curve_path=curve_path
    )
    checkpoint.write(out_path)
    write_json(f"{stem}-resolved-config.json", settings.to_dict())

    losses: List[float] = [row["loss"] for row in checkpoint.history]
    return {
        "checkpoint": out_path,
        "loss_curve": curve_path,
        "modality": modality,
        "initial_loss": losses[0],
        "final_loss": losses[-1],
    }
