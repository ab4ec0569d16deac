import struct

import numpy as np
import pytest
from chaoslib.exceptions import ActivityFailed

from modalign.exceptions import (
    InvalidInput,
    UnsupportedVersion,
    VolumeFormatError,
)
from modalign.volumes.mvol import (
    VolumeRecord,
    decode_mvol,
    encode_mvol,
    header_size,
    read_mvol,
    write_mvol,
)


def make_record(shape=(4, 5, 6), record_id="case00001-T1") -> VolumeRecord:
    rng = np.random.default_rng(0)
    return VolumeRecord(
        id=record_id,
        modality="T1",
        voxels=rng.random(shape, dtype=np.float32),
        report="T1 sequence shows cyst in superior anterior left region.",
        labels=(1, 0, 0),
    )


def test_roundtrip_is_bit_exact(tmp_path):
    record = make_record()
    path = tmp_path / "case00001-T1.mvol"
    write_mvol(record, str(path))
    restored = read_mvol(str(path))
    assert restored == record
    assert restored.voxels.dtype == np.float32


def test_layout_matches_the_header():
    record = make_record()
    payload = encode_mvol(record)
    assert payload[:4] == b"MVOL"
    assert struct.unpack_from("<IIII", payload, 4) == (1, 4, 5, 6)
    assert len(payload) == header_size(record) + 4 * 5 * 6 * 4


def test_id_comes_from_the_file_stem(tmp_path):
    record = make_record()
    path = tmp_path / "renamed.mvol"
    write_mvol(record, str(path))
    assert read_mvol(str(path)).id == "renamed"
    assert read_mvol(str(path), record_id="x", split="test").split == "test"


def test_bad_magic():
    with pytest.raises(VolumeFormatError) as x:
        decode_mvol(b"NOPE" + bytes(40), "bad")
    assert "bad magic" in str(x.value)


def test_truncated_payload_reports_sizes():
    payload = encode_mvol(make_record())
    with pytest.raises(VolumeFormatError) as x:
        decode_mvol(payload[:-4], "short")
    assert x.value.expected == len(payload)
    assert x.value.actual == len(payload) - 4


def test_unsupported_version():
    payload = bytearray(encode_mvol(make_record()))
    payload[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersion):
        decode_mvol(bytes(payload), "v2")


def test_non_finite_voxels_are_not_encoded():
    record = make_record()
    record.voxels[0, 0, 0] = np.nan
    with pytest.raises(InvalidInput):
        encode_mvol(record)


def test_write_failure_is_an_activity_failure(tmp_path):
    with pytest.raises(ActivityFailed):
        write_mvol(make_record(), str(tmp_path / "missing" / "dir" / "x.mvol"))


def test_validate():
    record = make_record()
    record.validate(class_count=3, modalities=["T1", "T2"])

    with pytest.raises(InvalidInput):
        record.validate(class_count=4)
    with pytest.raises(InvalidInput):
        record.validate(modalities=["DWI"])

    normal = VolumeRecord("n", "T1", np.zeros((2, 2, 2)), "", (0, 0, 0))
    with pytest.raises(InvalidInput):
        normal.validate()
    normal.validate(normal_class_policy="implicit")

    bright = VolumeRecord("b", "T1", np.full((2, 2, 2), 2.0), "", (1,))
    with pytest.raises(InvalidInput):
        bright.validate()


def test_active_classes():
    assert make_record().active_classes == (0,)


def test_invalid_utf8_text_is_a_format_error():
    record = make_record()
    record.report = "ab"
    payload = bytearray(encode_mvol(record))
    end = header_size(record)
    assert payload[end - 2 : end] == b"ab"
    payload[end - 2 : end] = b"\xff\xfe"
    with pytest.raises(VolumeFormatError) as x:
        decode_mvol(bytes(payload), "garbled")
    assert "report" in str(x.value)

    record = make_record()
    payload = bytearray(encode_mvol(record))
    payload[22:24] = b"\xff\xfe"
    with pytest.raises(VolumeFormatError) as x:
        decode_mvol(bytes(payload), "garbled")
    assert "modality" in str(x.value)


def test_random_records_survive_serialization():
    rng = np.random.default_rng(42)
    words = ["cyst", "lésion", "abscess", "区域", "left", "T2*", ""]
    for index in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 7, size=3))
        record = VolumeRecord(
            id=f"case{index:05d}",
            modality=str(rng.choice(["T1", "T2", "DWI", "FLAIR+C"])),
            voxels=rng.standard_normal(shape).astype(np.float32),
            report=" ".join(rng.choice(words, size=int(rng.integers(0, 9)))),
            labels=tuple(
                int(v) for v in rng.integers(0, 2, size=rng.integers(1, 6))
            ),
            split=str(rng.choice(["train", "val", "test"])),
        )
        restored = decode_mvol(encode_mvol(record), record.id, record.split)
        assert restored == record
        assert restored.voxels.tobytes() == record.voxels.tobytes()
