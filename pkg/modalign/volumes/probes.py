from typing import Dict

import numpy as np
from chaoslib.types import Configuration

from modalign import get_logger
from modalign.exceptions import InvalidInput
from modalign.types import ActivityResult
from modalign.volumes.manifest import DatasetManifest
from modalign.volumes.mvol import header_size, read_mvol

__all__ = ["describe_volume", "manifest_class_counts", "validate_manifest"]

logger = get_logger()


def describe_volume(
    path: str, configuration: Configuration = None
) -> ActivityResult:
    """
    Describe an MVOL file: shape, modality, report, labels and voxel range.
    """
    record = read_mvol(path)
    return {
        "id": record.id,
        "modality": record.modality,
        "shape": list(record.shape),
        "report": record.report,
        "labels": list(record.labels),
        "min": float(np.min(record.voxels)) if record.voxels.size else None,
        "max": float(np.max(record.voxels)) if record.voxels.size else None,
        "header_bytes": header_size(record),
    }


def manifest_class_counts(
    manifest_path: str, split: str = None, configuration: Configuration = None
) -> Dict[str, int]:
    """
    Count how many records carry each class label, per class name.
    """
    manifest = DatasetManifest.load(manifest_path)
    counts = {name: 0 for name in manifest.class_names}
    for record in manifest.load_records(split=split):
        for k in record.active_classes:
            counts[manifest.class_names[k]] += 1
    return counts


def validate_manifest(
    manifest_path: str, configuration: Configuration = None
) -> bool:
    """
    Return `True` when the manifest and every record it lists are valid.
    """
    try:
        DatasetManifest.load(manifest_path, validate=True)
    except InvalidInput as e:
        logger.warning(f"Manifest '{manifest_path}' is invalid: {e}")
        return False
    return True
