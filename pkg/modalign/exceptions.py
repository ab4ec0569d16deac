from typing import Dict, Optional

from chaoslib.exceptions import (
    ActivityFailed,
    ChaosException,
    InterruptExecution,
    InvalidActivity,
)

__all__ = [
    "ModalignError",
    "InvalidInput",
    "UnknownModality",
    "VolumeFormatError",
    "UnsupportedVersion",
    "CheckpointError",
    "DegenerateProjection",
    "TrainingAborted",
    "FrozenParameterMutated",
]


class ModalignError(ChaosException):
    pass


class InvalidInput(InvalidActivity, ModalignError):
    """
    The caller handed us something we cannot work with: a bad argument,
    an unknown config key, a class index out of range...
    """


class UnknownModality(InvalidInput):
    def __init__(self, modality: str, known: Optional[list] = None):
        self.modality = modality
        self.known = list(known or [])
        super().__init__(
            f"Unknown modality '{modality}', expected one of: "
            f"{', '.join(self.known) or '<none>'}"
        )


class VolumeFormatError(ActivityFailed, ModalignError):
    def __init__(
        self,
        message: str,
        expected: Optional[int] = None,
        actual: Optional[int] = None,
    ):
        self.expected = expected
        self.actual = actual
        super().__init__(message)


class UnsupportedVersion(VolumeFormatError):
    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(
            f"Unsupported MVOL version {found} (this build reads {supported})"
        )


class CheckpointError(ActivityFailed, ModalignError):
    pass


class DegenerateProjection(ActivityFailed, ModalignError):
    pass


class TrainingAborted(InterruptExecution, ModalignError):
    def __init__(
        self,
        message: str,
        epoch: int = -1,
        batch_index: int = -1,
        parameter_norms: Optional[Dict[str, float]] = None,
    ):
        self.epoch = epoch
        self.batch_index = batch_index
        self.parameter_norms = dict(parameter_norms or {})
        super().__init__(message)


class FrozenParameterMutated(InterruptExecution, ModalignError):
    def __init__(self, component: str, expected: str, actual: str):
        self.component = component
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Frozen component '{component}' changed during training "
            f"(sha256 {expected[:12]}... became {actual[:12]}...)"
        )
