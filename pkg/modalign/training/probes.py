import os
from typing import Optional

from chaoslib.types import Configuration

from modalign import get_logger
from modalign.exceptions import CheckpointError
from modalign.training.checkpoint import ModelCheckpoint
from modalign.training.trainer import evaluate
from modalign.types import ActivityResult
from modalign.utils import configure_runtime, write_json
from modalign.volumes.manifest import DatasetManifest

__all__ = [
    "checkpoint_integrity",
    "evaluate_checkpoint",
    "frozen_components_intact",
]

logger = get_logger()


def evaluate_checkpoint(
    checkpoint_path: str,
    manifest_path: str,
    split: str = "test",
    report_path: Optional[str] = None,
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Accuracy, macro AUC, per-class AUC and confusion counts of a fine-tuned
    checkpoint on a split. Classes without an AUC on that split are
    reported as `null`. When `report_path` is given, the report is saved
    there with the resolved settings of the run next to it.

    ```json
    {
        "type": "probe",
        "name": "test-accuracy",
        "provider": {
            "type": "python",
            "module": "modalign.training.probes",
            "func": "evaluate_checkpoint",
            "arguments": {
                "checkpoint_path": "./model.ckpt",
                "manifest_path": "./data/manifest.json",
                "split": "test"
            }
        },
        "tolerance": {
            "type": "jsonpath",
            "path": "$.accuracy",
            "expect": 1,
            "target": "> 0.5"
        }
    }
    ```
    """
    configure_runtime(configuration)
    checkpoint = ModelCheckpoint.read(checkpoint_path)
    manifest = DatasetManifest.load(manifest_path)
    report = evaluate(checkpoint, manifest, split).to_dict()
    if report_path:
        write_json(report_path, report)
        write_json(
            f"{os.path.splitext(report_path)[0]}-resolved-config.json",
            {
                "checkpoint_path": checkpoint_path,
                "manifest_path": manifest_path,
                "split": split,
                "finetune": checkpoint.config.get("finetune", {}),
            },
        )
    return report


def checkpoint_integrity(
    checkpoint_path: str, configuration: Configuration = None
) -> bool:
    """
    Re-read a checkpoint and verify the checksum of every component.
    """
    try:
        ModelCheckpoint.read(checkpoint_path, verify=True)
    except CheckpointError as x:
        logger.warning(f"Checkpoint '{checkpoint_path}' is corrupt: {x}")
        return False
    return True


def frozen_components_intact(
    reference_path: str,
    checkpoint_path: str,
    configuration: Configuration = None,
) -> bool:
    """
    Tell whether every component frozen in the reference checkpoint is
    present, still frozen and byte-identical in the other checkpoint.
    """
    reference = ModelCheckpoint.read(reference_path)
    other = ModelCheckpoint.read(checkpoint_path)
    other_sums = other.checksums()
    other_flags = other.frozen_flags()
    intact = True
    for name, frozen in reference.frozen_flags().items():
        if not frozen:
            continue
        expected = reference.component(name).sha256()
        if other_sums.get(name) != expected or not other_flags.get(name):
            logger.warning(f"Frozen component '{name}' does not match")
            intact = False
    return intact
