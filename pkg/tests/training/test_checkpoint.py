import json
import struct

import numpy as np
import pytest
import torch

from modalign.exceptions import CheckpointError
from modalign.training.checkpoint import (
    MAGIC,
    VERSION,
    ComponentBlob,
    ModelCheckpoint,
    split_state,
)


def sample_checkpoint() -> ModelCheckpoint:
    torch.manual_seed(0)
    return ModelCheckpoint(
        components={
            "head": ComponentBlob.from_state_dict(
                {"weight": torch.randn(3, 4), "bias": torch.zeros(3)}
            ),
            "text_encoder": ComponentBlob.from_state_dict(
                {"embedding": torch.randn(10, 4, dtype=torch.float64)},
                frozen=True,
            ),
        },
        config={"kind": "finetune", "class_names": ["a", "b", "c"]},
        history=[{"epoch": 0, "loss": 0.5, "val_auc": None}],
    )


def test_write_and_read(tmp_path):
    checkpoint = sample_checkpoint()
    path = str(tmp_path / "nested" / "model.ckpt")
    checkpoint.write(path)

    loaded = ModelCheckpoint.read(path)
    assert loaded == checkpoint
    assert loaded.frozen_flags() == {"head": False, "text_encoder": True}
    assert loaded.history[0]["val_auc"] is None
    state = loaded.component("text_encoder").state_dict()
    assert state["embedding"].dtype == torch.float64
    assert torch.equal(
        state["embedding"],
        checkpoint.component("text_encoder").state_dict()["embedding"],
    )


def test_serialization_is_deterministic():
    assert sample_checkpoint().to_bytes() == sample_checkpoint().to_bytes()


def test_flipped_byte_fails_the_checksum():
    payload = bytearray(sample_checkpoint().to_bytes())
    payload[-1] ^= 0xFF
    with pytest.raises(CheckpointError) as x:
        ModelCheckpoint.from_bytes(bytes(payload))
    assert "Checksum mismatch" in str(x.value)

    # skipping verification still reads it
    ModelCheckpoint.from_bytes(bytes(payload), verify=False)


def test_truncated_payloads():
    payload = sample_checkpoint().to_bytes()
    for size in (0, 10, 40, len(payload) - 1):
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_bytes(payload[:size])


def test_bad_magic():
    payload = b"NOPE" + sample_checkpoint().to_bytes()[4:]
    with pytest.raises(CheckpointError):
        ModelCheckpoint.from_bytes(payload)


def test_missing_file_and_component(tmp_path):
    with pytest.raises(CheckpointError):
        ModelCheckpoint.read(str(tmp_path / "absent.ckpt"))
    with pytest.raises(CheckpointError):
        sample_checkpoint().component("fusion")


def test_checksum_ignores_tensor_insertion_order():
    a = ComponentBlob.from_state_dict(
        {"x": torch.ones(2), "y": torch.zeros(3)}
    )
    b = ComponentBlob.from_state_dict(
        {"y": torch.zeros(3), "x": torch.ones(2)}
    )
    assert a.sha256() == b.sha256()
    assert a.sha256() != ComponentBlob.from_state_dict(
        {"x": torch.ones(2), "y": torch.ones(3)}
    ).sha256()


def test_split_and_merge_state():
    model = torch.nn.ModuleDict(
        {
            "conv_streams": torch.nn.ModuleDict(
                {"T1": torch.nn.Linear(2, 2), "T2": torch.nn.Linear(2, 2)}
            ),
            "head": torch.nn.Linear(2, 3),
        }
    )
    state = model.state_dict()
    components = split_state(state, {"conv_streams": 2})
    assert sorted(components) == ["conv_streams.T1", "conv_streams.T2", "head"]
    assert sorted(components["head"]) == ["bias", "weight"]

    checkpoint = ModelCheckpoint(
        {
            name: ComponentBlob.from_state_dict(part)
            for name, part in components.items()
        }
    )
    merged = checkpoint.merged_state()
    assert sorted(merged) == sorted(state)
    for key, tensor in state.items():
        assert np.array_equal(merged[key].numpy(), tensor.numpy())

    streams = checkpoint.merged_state("conv_streams")
    assert sorted(streams) == [
        "T1.bias",
        "T1.weight",
        "T2.bias",
        "T2.weight",
    ]


def test_random_containers_survive_serialization():
    rng = np.random.default_rng(0)
    dtypes = (np.float32, np.float64, np.int64, np.uint8)
    for n in range(100):
        components = {}
        for c in range(rng.integers(1, 4)):
            tensors = {}
            for t in range(rng.integers(1, 4)):
                shape = tuple(rng.integers(0, 5, rng.integers(0, 4)))
                dtype = dtypes[rng.integers(len(dtypes))]
                values = np.asarray(rng.random(shape) * 100)
                tensors[f"t{t}"] = values.astype(dtype)
            components[f"c{c}"] = ComponentBlob(tensors, bool(c % 2))
        checkpoint = ModelCheckpoint(components, {"instance": n})

        loaded = ModelCheckpoint.from_bytes(checkpoint.to_bytes())
        assert loaded == checkpoint
        for name, blob in components.items():
            for key, array in blob.tensors.items():
                restored = loaded.components[name].tensors[key]
                assert restored.dtype == array.dtype
                assert restored.shape == array.shape
                assert np.array_equal(restored, array)


def container(index: dict, data: bytes = b"") -> bytes:
    raw = json.dumps(index).encode("utf-8")
    return struct.pack("<4sIQ", MAGIC, VERSION, len(raw)) + raw + data


def test_index_without_components_is_refused():
    for index in ({}, {"components": []}, []):
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_bytes(container(index))


def test_malformed_component_entries_are_refused():
    entries = [
        {"tensors": []},
        {"frozen": False, "sha256": "0" * 64},
        {"frozen": False, "sha256": "0" * 64, "tensors": [{"name": "w"}]},
    ]
    for entry in entries:
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_bytes(
                container({"components": {"head": entry}})
            )


def test_shape_disagreeing_with_nbytes_is_refused():
    payload = sample_checkpoint().to_bytes()
    (length,) = struct.unpack_from("<Q", payload, 8)
    index = json.loads(payload[16 : 16 + length])
    data = payload[16 + length :]
    # head.bias is float32 [3], claim [4]
    bias = index["components"]["head"]["tensors"][0]
    assert bias["name"] == "bias"
    bias["shape"] = [4]
    with pytest.raises(CheckpointError) as x:
        ModelCheckpoint.from_bytes(container(index, data), verify=False)
    assert "head.bias" in str(x.value)
