import os
from typing import Any, Dict, List, Optional

from chaoslib.types import Configuration

from modalign import get_logger
from modalign.config import PhantomSpec
from modalign.types import ActivityResult
from modalign.utils import write_json
from modalign.volumes.mvol import VolumeRecord, read_mvol, write_mvol
from modalign.volumes.phantom import MANIFEST_NAME, synthesize_dataset
from modalign.volumes.transforms import normalize_volume, resize_volume

__all__ = ["generate_phantom_dataset", "resample_volume"]

logger = get_logger()


def generate_phantom_dataset(
    out_dir: str,
    spec: Optional[Dict[str, Any]] = None,
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Generate a synthetic dataset of 3D phantoms with their templated
    reports, then write its manifest and the resolved spec to `out_dir`.

    ```json
    {
        "type": "action",
        "name": "generate-phantoms",
        "provider": {
            "type": "python",
            "module": "modalign.volumes.actions",
            "func": "generate_phantom_dataset",
            "arguments": {
                "out_dir": "./data",
                "spec": {"n_records": 400, "n_classes": 4}
            }
        }
    }
    ```
    """
    phantom = PhantomSpec.from_mapping(spec)
    manifest = synthesize_dataset(phantom, out_dir)
    write_json(
        os.path.join(out_dir, "resolved-config.json"), phantom.to_dict()
    )

    splits: Dict[str, int] = {}
    for entry in manifest.records:
        splits[entry.split] = splits.get(entry.split, 0) + 1

    return {
        "manifest": os.path.join(out_dir, MANIFEST_NAME),
        "records": len(manifest.records),
        "splits": splits,
        "class_names": manifest.class_names,
        "modalities": manifest.modality_vocabulary,
    }


def resample_volume(
    path: str,
    out_path: str,
    target: List[int],
    normalize: bool = True,
    configuration: Configuration = None,
) -> ActivityResult:
    """
    Resize an MVOL volume to `target` (D, H, W) with corner-aligned
    trilinear sampling, optionally min-max normalize it, and write the
    result to `out_path`. The report, labels and modality are kept.
    """
    record = read_mvol(path)
    voxels = resize_volume(record.voxels, target)
    if normalize:
        voxels = normalize_volume(voxels)

    resampled = VolumeRecord(
        id=record.id,
        modality=record.modality,
        voxels=voxels,
        report=record.report,
        labels=record.labels,
        split=record.split,
    )
    write_mvol(resampled, out_path)
    logger.info(
        f"Resampled '{path}' from {record.shape} to {resampled.shape}"
    )
    return {"path": out_path, "shape": list(resampled.shape)}
