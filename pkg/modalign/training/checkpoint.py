"""
Checkpoint container.

    magic "MCKP" | version u32 | index length u64 | index (UTF-8 JSON)
    then the raw little-endian tensor bytes of every component, components
    in name order and tensors of a component in name order

The index records, per component, its frozen flag, the SHA-256 of its blob
and where each tensor lives. It also carries the config snapshot and the
training history of the run that produced the checkpoint.
"""

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np
import torch

from modalign import get_logger
from modalign.exceptions import CheckpointError

__all__ = [
    "ComponentBlob",
    "MAGIC",
    "ModelCheckpoint",
    "VERSION",
    "split_state",
]

logger = get_logger()

MAGIC = b"MCKP"
VERSION = 1

_PREAMBLE = struct.Struct("<4sIQ")


@dataclass(eq=False)
class ComponentBlob:
    tensors: Dict[str, np.ndarray]
    frozen: bool = False

    @classmethod
    def from_state_dict(
        cls, state: Mapping[str, torch.Tensor], frozen: bool = False
    ) -> "ComponentBlob":
        return cls(
            tensors={
                name: tensor.detach().cpu().contiguous().numpy().copy()
                for name, tensor in state.items()
            },
            frozen=frozen,
        )

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {
            name: torch.from_numpy(array.copy())
            for name, array in self.tensors.items()
        }

    def payload(self) -> bytes:
        return b"".join(
            _little_endian(self.tensors[name]).tobytes(order="C")
            for name in sorted(self.tensors)
        )

    def sha256(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()


def _little_endian(array: np.ndarray) -> np.ndarray:
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def _tensor_layout(
    component: str, spec: Mapping[str, Any]
) -> Tuple[str, int, int, np.dtype, Tuple[int, ...]]:
    try:
        name = str(spec["name"])
        offset = int(spec["offset"])
        nbytes = int(spec["nbytes"])
        dtype = np.dtype(spec["dtype"])
        shape = tuple(int(s) for s in spec["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(
            f"Tensor entry of component '{component}' is malformed: {e!r}"
        )
    if offset < 0 or any(s < 0 for s in shape):
        raise CheckpointError(
            f"Tensor '{component}.{name}' has a negative offset or dimension"
        )
    if math.prod(shape) * dtype.itemsize != nbytes:
        raise CheckpointError(
            f"Tensor '{component}.{name}' declares shape {list(shape)} of "
            f"{dtype.str} but {nbytes} bytes"
        )
    return name, offset, nbytes, dtype, shape


def split_state(
    state: Mapping[str, torch.Tensor], depth: Mapping[str, int] = None
) -> Dict[str, Dict[str, torch.Tensor]]:
    """
    Group a module state dict into components named after the leading
    parts of each key. `depth` tells how many parts name the component for
    a given first part, one by default:

        split_state(state, {"conv_streams": 2})
        # {"conv_streams.T1": {...}, "fusion": {...}, "head": {...}}
    """
    depth = depth or {}
    components: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, tensor in state.items():
        parts = key.split(".")
        cut = depth.get(parts[0], 1)
        name = ".".join(parts[:cut])
        components.setdefault(name, {})[".".join(parts[cut:])] = tensor
    return components


@dataclass(eq=False)
class ModelCheckpoint:
    components: Dict[str, ComponentBlob]
    config: Dict[str, Any] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            self.checksums() == other.checksums()
            and self.frozen_flags() == other.frozen_flags()
            and _canonical(self.config) == _canonical(other.config)
            and _canonical(self.history) == _canonical(other.history)
        )

    def checksums(self) -> Dict[str, str]:
        return {
            name: blob.sha256()
            for name, blob in sorted(self.components.items())
        }

    def frozen_flags(self) -> Dict[str, bool]:
        return {
            name: blob.frozen for name, blob in sorted(self.components.items())
        }

    def component(self, name: str) -> ComponentBlob:
        if name not in self.components:
            raise CheckpointError(
                f"Checkpoint has no component '{name}', it holds: "
                f"{', '.join(sorted(self.components))}"
            )
        return self.components[name]

    def merged_state(self, prefix: str = "") -> Dict[str, torch.Tensor]:
        """
        Rebuild a module state dict from every component whose name starts
        with `prefix`, the inverse of `split_state`.
        """
        state = {}
        for name, blob in sorted(self.components.items()):
            if not name.startswith(prefix):
                continue
            relative = name[len(prefix) :].lstrip(".")
            for key, tensor in blob.state_dict().items():
                state[".".join(p for p in (relative, key) if p)] = tensor
        return state

    def to_bytes(self) -> bytes:
        index_components = {}
        offset = 0
        blobs = []
        for name in sorted(self.components):
            blob = self.components[name]
            tensors = []
            for tensor_name in sorted(blob.tensors):
                array = _little_endian(blob.tensors[tensor_name])
                tensors.append(
                    {
                        "name": tensor_name,
                        "dtype": array.dtype.str,
                        "shape": list(array.shape),
                        "offset": offset,
                        "nbytes": int(array.nbytes),
                    }
                )
                offset += int(array.nbytes)
            payload = blob.payload()
            blobs.append(payload)
            index_components[name] = {
                "frozen": bool(blob.frozen),
                "sha256": hashlib.sha256(payload).hexdigest(),
                "tensors": tensors,
            }

        index = json.dumps(
            {
                "components": index_components,
                "config": self.config,
                "history": self.history,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        return b"".join(
            [_PREAMBLE.pack(MAGIC, VERSION, len(index)), index, *blobs]
        )

    @classmethod
    def from_bytes(
        cls, payload: bytes, verify: bool = True
    ) -> "ModelCheckpoint":
        if len(payload) < _PREAMBLE.size:
            raise CheckpointError(
                f"Checkpoint truncated: {len(payload)} bytes, the header "
                f"alone needs {_PREAMBLE.size}"
            )
        magic, version, index_length = _PREAMBLE.unpack_from(payload, 0)
        if magic != MAGIC:
            raise CheckpointError("Not a checkpoint container (bad magic)")
        if version != VERSION:
            raise CheckpointError(
                f"Unsupported checkpoint version {version} (this build reads "
                f"{VERSION})"
            )

        start = _PREAMBLE.size + index_length
        if len(payload) < start:
            raise CheckpointError("Checkpoint truncated inside its index")
        try:
            index = json.loads(payload[_PREAMBLE.size : start].decode("utf-8"))
        except ValueError as e:
            raise CheckpointError(f"Checkpoint index is not valid JSON: {e}")

        if not isinstance(index, dict) or not isinstance(
            index.get("components"), dict
        ):
            raise CheckpointError("Checkpoint index has no component table")

        data = memoryview(payload)[start:]
        components = {}
        for name, entry in index["components"].items():
            try:
                layout = [_tensor_layout(name, s) for s in entry["tensors"]]
                expected = str(entry["sha256"])
                frozen = bool(entry["frozen"])
            except (KeyError, TypeError) as e:
                raise CheckpointError(
                    f"Index entry of component '{name}' is malformed, "
                    f"missing or bad {e}"
                )
            tensors = {}
            digest = hashlib.sha256()
            for tensor_name, offset, nbytes, dtype, shape in layout:
                end = offset + nbytes
                if end > len(data):
                    raise CheckpointError(
                        f"Checkpoint truncated: tensor '{name}.{tensor_name}'"
                        f" ends at byte {end}, the data holds {len(data)}"
                    )
                chunk = data[offset:end]
                digest.update(chunk)
                array = np.frombuffer(chunk, dtype=dtype)
                tensors[tensor_name] = array.reshape(shape).astype(
                    array.dtype.newbyteorder("="), copy=True
                )
            if verify and digest.hexdigest() != expected:
                raise CheckpointError(
                    f"Checksum mismatch for component '{name}': expected "
                    f"{expected}, computed {digest.hexdigest()}"
                )
            components[name] = ComponentBlob(tensors, frozen)

        return cls(
            components=components,
            config=index.get("config", {}),
            history=index.get("history", []),
        )

    def write(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        payload = self.to_bytes()
        try:
            with open(path, "wb") as fd:
                fd.write(payload)
        except OSError as e:
            raise CheckpointError(
                f"Cannot write checkpoint '{path}': {e.strerror or e}"
            )
        logger.info(
            f"Checkpoint with {len(self.components)} component(s) saved to "
            f"'{path}'"
        )

    @classmethod
    def read(cls, path: str, verify: bool = True) -> "ModelCheckpoint":
        try:
            with open(path, "rb") as fd:
                payload = fd.read()
        except OSError as e:
            raise CheckpointError(
                f"Cannot read checkpoint '{path}': {e.strerror or e}"
            )
        return cls.from_bytes(payload, verify=verify)


def _canonical(value: Any) -> str:
    return json.dumps(value, sort_keys=True)
