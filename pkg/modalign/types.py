from typing import Any, Dict

import numpy as np

__all__ = ["ActivityResult", "ModalityTag", "Split", "SPLITS", "Voxels"]

# the value returned by every action and probe, it must stay JSON friendly
ActivityResult = Dict[str, Any]

ModalityTag = str

Split = str
SPLITS = ("train", "val", "test")

# float32 grid laid out as [D, H, W]
Voxels = np.ndarray
