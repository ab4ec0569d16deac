import os

import numpy as np
import pytest

from modalign.config import PhantomSpec
from modalign.exceptions import InvalidInput
from modalign.volumes.manifest import DatasetManifest
from modalign.volumes.phantom import (
    OCTANTS,
    lesion_profile,
    make_record,
    record_id,
    split_for,
    synthesize_dataset,
)

SPEC = {"grid_size": 16, "n_records": 12, "n_classes": 3, "seed": 5}


def test_record_only_depends_on_spec_and_index():
    spec = PhantomSpec.from_mapping(SPEC)
    names = spec.resolved_class_names()
    assert make_record(spec, names, 4) == make_record(spec, names, 4)
    assert make_record(spec, names, 4) != make_record(spec, names, 5)


def test_record_contents():
    spec = PhantomSpec.from_mapping(SPEC)
    names = spec.resolved_class_names()
    record = make_record(spec, names, 4)

    assert record.id == record_id(4, record.modality) == "case00004-T2"
    assert record.labels == (0, 1, 0)
    assert record.shape == (16, 16, 16)
    assert record.report.startswith("T2 sequence shows hemangioma in ")
    assert record.report.count("T2") == 1
    assert record.split == split_for(record.id)
    record.validate(class_count=3, modalities=spec.modalities)


def test_multi_label_records():
    spec = PhantomSpec.from_mapping({**SPEC, "labels_per_record": 2})
    record = make_record(spec, spec.resolved_class_names(), 2)
    assert sum(record.labels) == 2
    assert " and " in record.report


def test_modality_named_in_class_names_is_refused():
    spec = PhantomSpec.from_mapping(
        {**SPEC, "class_names": ["T1 lesion", "b", "c"]}
    )
    with pytest.raises(InvalidInput):
        make_record(spec, spec.resolved_class_names(), 0)


def test_split_for_is_stable_and_balanced():
    assert split_for("case00000-T1") == split_for("case00000-T1")
    splits = [split_for(record_id(i, "T1")) for i in range(2000)]
    share = splits.count("train") / len(splits)
    assert 0.65 < share < 0.75
    assert set(splits) == {"train", "val", "test"}


def test_lesion_profile():
    profile = lesion_profile(8, (4.0, 4.0, 4.0), (2.0, 2.0, 2.0))
    assert profile.max() <= 1.0
    assert profile.min() == 0.0
    assert profile[3, 3, 3] > profile[1, 3, 3]
    assert profile[0, 0, 0] == 0.0


def test_synthesis_does_not_depend_on_workers(tmp_path):
    serial = synthesize_dataset(
        PhantomSpec.from_mapping(SPEC), str(tmp_path / "serial")
    )
    threaded = synthesize_dataset(
        PhantomSpec.from_mapping({**SPEC, "workers": 4}),
        str(tmp_path / "threaded"),
    )
    assert serial.records == threaded.records
    for entry in serial.records:
        with open(serial.resolve(entry), "rb") as a, open(
            threaded.resolve(entry), "rb"
        ) as b:
            assert a.read() == b.read()


def test_synthesized_manifest_is_valid(phantom_dir):
    manifest = DatasetManifest.load(
        os.path.join(phantom_dir, "manifest.json"), validate=True
    )
    assert manifest.class_names == ["cyst", "hemangioma"]
    assert manifest.modality_vocabulary == ["T1", "T2"]
    assert len(manifest.records) == 60
    assert len(manifest.load_records("train", modality="T1")) >= 8


def test_classes_are_separable_by_intensity_sign():
    spec = PhantomSpec.from_mapping(
        {**SPEC, "n_classes": 6, "noise_std": 0.0}
    )
    names = spec.resolved_class_names()
    bright = make_record(spec, names, 0).voxels
    dark = make_record(spec, names, 3).voxels
    base = spec.base_intensity("T1")
    assert bright.max() > base + 0.1
    assert dark.min() < base - 0.05
    assert np.isclose(np.median(bright), base)


def test_modality_matching_part_of_a_word_is_accepted():
    spec = PhantomSpec.from_mapping({**SPEC, "modalities": ["ant", "cy"]})
    names = spec.resolved_class_names()
    for index in range(len(OCTANTS) * 2):
        record = make_record(spec, names, index)
        assert record.report.split()[0] == record.modality


def test_region_word_as_modality_is_refused():
    spec = PhantomSpec.from_mapping({**SPEC, "modalities": ["left"]})
    names = spec.resolved_class_names()
    with pytest.raises(InvalidInput):
        for index in range(len(OCTANTS) * 4):
            make_record(spec, names, index)


def test_classes_are_balanced(tmp_path):
    spec = PhantomSpec.from_mapping(
        {"grid_size": 8, "n_records": 400, "n_classes": 4}
    )
    manifest = synthesize_dataset(spec, str(tmp_path))
    counts = np.zeros(4, dtype=int)
    for record in manifest.load_records():
        counts += np.asarray(record.labels)
    assert counts.sum() == 400
    assert all(99 <= c <= 101 for c in counts)
