"""
The MVOL container: one volume, its modality tag, its label vector and its
report in a single little-endian file.

    magic "MVOL" | version u32 | D, H, W u32
    modality u16 length + UTF-8 | labels u16 count + u8 each
    report u32 length + UTF-8 | D*H*W float32, D slowest, W fastest

The record id is the file stem and the split lives in the manifest, neither
is stored in the file.
"""

import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from chaoslib.exceptions import ActivityFailed

from modalign import get_logger
from modalign.exceptions import (
    InvalidInput,
    UnsupportedVersion,
    VolumeFormatError,
)
from modalign.types import SPLITS, ModalityTag, Split, Voxels

__all__ = [
    "MAGIC",
    "VERSION",
    "VolumeRecord",
    "decode_mvol",
    "encode_mvol",
    "header_size",
    "read_mvol",
    "write_mvol",
]

logger = get_logger()

MAGIC = b"MVOL"
VERSION = 1

_PREAMBLE = struct.Struct("<4sIIII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass(eq=False)
class VolumeRecord:
    id: str
    modality: ModalityTag
    voxels: Voxels
    report: str
    labels: Tuple[int, ...]
    split: Split = "train"

    def __post_init__(self) -> None:
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.labels = tuple(int(v) for v in self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def active_classes(self) -> Tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.labels) if v)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VolumeRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.modality == other.modality
            and self.report == other.report
            and self.labels == other.labels
            and self.split == other.split
            and self.voxels.shape == other.voxels.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
        )

    def validate(
        self,
        class_count: Optional[int] = None,
        modalities: Optional[Sequence[str]] = None,
        normal_class_policy: str = "explicit",
    ) -> None:
        """
        Raise `InvalidInput` when the record breaks the dataset rules: finite
        voxels in [0, 1], binary labels of the expected length, a known
        modality and split. An all-zero label vector is only accepted under
        the implicit normal class policy.
        """
        if self.voxels.ndim != 3:
            raise InvalidInput(
                f"Record '{self.id}' voxels must be 3D, got "
                f"{self.voxels.ndim}D"
            )
        if not np.all(np.isfinite(self.voxels)):
            raise InvalidInput(f"Record '{self.id}' has non-finite voxels")
        if self.voxels.size and (
            self.voxels.min() < 0.0 or self.voxels.max() > 1.0
        ):
            raise InvalidInput(f"Record '{self.id}' voxels leave [0, 1]")
        if any(v not in (0, 1) for v in self.labels):
            raise InvalidInput(f"Record '{self.id}' labels must be 0 or 1")
        if class_count is not None and len(self.labels) != class_count:
            raise InvalidInput(
                f"Record '{self.id}' has {len(self.labels)} labels, the "
                f"dataset declares {class_count} classes"
            )
        if not any(self.labels) and normal_class_policy != "implicit":
            raise InvalidInput(
                f"Record '{self.id}' has no active label but the dataset "
                "has no implicit normal class"
            )
        if modalities is not None and self.modality not in modalities:
            raise InvalidInput(
                f"Record '{self.id}' modality '{self.modality}' is not in "
                f"the modality vocabulary"
            )
        if self.split not in SPLITS:
            raise InvalidInput(
                f"Record '{self.id}' split '{self.split}' is not one of "
                f"{', '.join(SPLITS)}"
            )


def header_size(record: VolumeRecord) -> int:
    return (
        _PREAMBLE.size
        + _U16.size
        + len(record.modality.encode("utf-8"))
        + _U16.size
        + len(record.labels)
        + _U32.size
        + len(record.report.encode("utf-8"))
    )


def encode_mvol(record: VolumeRecord) -> bytes:
    voxels = record.voxels
    if voxels.ndim != 3:
        raise InvalidInput(
            f"Cannot encode '{record.id}': voxels must be a 3D grid"
        )
    if not np.all(np.isfinite(voxels)):
        raise InvalidInput(
            f"Cannot encode '{record.id}': the voxel grid holds non-finite "
            "values"
        )

    modality = record.modality.encode("utf-8")
    report = record.report.encode("utf-8")
    if len(modality) > 0xFFFF or len(record.labels) > 0xFFFF:
        raise InvalidInput(
            f"Cannot encode '{record.id}': modality or label vector too long"
        )
    if len(report) > 0xFFFFFFFF:
        raise InvalidInput(f"Cannot encode '{record.id}': report too long")
    if any(not 0 <= v <= 255 for v in record.labels):
        raise InvalidInput(f"Cannot encode '{record.id}': labels must fit u8")

    d, h, w = voxels.shape
    return b"".join(
        [
            _PREAMBLE.pack(MAGIC, VERSION, d, h, w),
            _U16.pack(len(modality)),
            modality,
            _U16.pack(len(record.labels)),
            bytes(record.labels),
            _U32.pack(len(report)),
            report,
            voxels.astype("<f4", copy=False).tobytes(order="C"),
        ]
    )


def decode_mvol(
    payload: bytes, record_id: str = "", split: Split = "train"
) -> VolumeRecord:
    size = len(payload)
    if size < len(MAGIC) or payload[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(
            f"'{record_id}' is not an MVOL file (bad magic)"
        )
    if size < _PREAMBLE.size:
        raise VolumeFormatError(
            f"'{record_id}' is truncated: header needs {_PREAMBLE.size} "
            f"bytes, got {size}",
            expected=_PREAMBLE.size,
            actual=size,
        )

    _, version, d, h, w = _PREAMBLE.unpack_from(payload, 0)
    if version != VERSION:
        raise UnsupportedVersion(version, VERSION)

    cursor = _PREAMBLE.size

    def take(count: int) -> bytes:
        nonlocal cursor
        end = cursor + count
        if end > size:
            raise VolumeFormatError(
                f"'{record_id}' is truncated: expected at least {end} bytes, "
                f"got {size}",
                expected=end,
                actual=size,
            )
        chunk = payload[cursor:end]
        cursor = end
        return chunk

    (modality_length,) = _U16.unpack(take(_U16.size))
    modality = _text(take(modality_length), "modality", record_id)
    (label_count,) = _U16.unpack(take(_U16.size))
    labels = tuple(take(label_count))
    (report_length,) = _U32.unpack(take(_U32.size))
    report = _text(take(report_length), "report", record_id)

    expected = cursor + d * h * w * 4
    if size != expected:
        raise VolumeFormatError(
            f"'{record_id}' header declares {d}x{h}x{w} voxels, that is "
            f"{expected} bytes in total, but the file holds {size}",
            expected=expected,
            actual=size,
        )
    voxels = (
        np.frombuffer(payload, dtype="<f4", count=d * h * w, offset=cursor)
        .reshape(d, h, w)
        .astype(np.float32)
    )

    return VolumeRecord(
        id=record_id,
        modality=modality,
        voxels=voxels,
        report=report,
        labels=labels,
        split=split,
    )


def _text(raw: bytes, field: str, record_id: str) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise VolumeFormatError(
            f"'{record_id}' has a {field} field that is not valid UTF-8: "
            f"{e.reason} at byte {e.start}"
        ) from e


def write_mvol(record: VolumeRecord, path: str) -> None:
    payload = encode_mvol(record)
    try:
        with open(path, "wb") as fd:
            fd.write(payload)
    except OSError as e:
        raise ActivityFailed(
            f"Cannot write MVOL file '{path}': {e.strerror or e}"
        )
    logger.debug(f"Wrote '{record.id}' ({len(payload)} bytes) to '{path}'")


def read_mvol(
    path: str, split: Split = "train", record_id: Optional[str] = None
) -> VolumeRecord:
    if record_id is None:
        record_id = os.path.splitext(os.path.basename(path))[0]
    try:
        with open(path, "rb") as fd:
            payload = fd.read()
    except OSError as e:
        raise VolumeFormatError(
            f"Cannot read MVOL file '{path}': {e.strerror or e}"
        )
    return decode_mvol(payload, record_id=record_id, split=split)
