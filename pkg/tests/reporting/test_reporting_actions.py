import csv
import json
import os
from dataclasses import replace

import numpy as np
import pytest

from modalign.config import AblationFlags
from modalign.exceptions import InvalidInput
from modalign.reporting.actions import CAM_MODALITY, export_cam, export_tsne
from modalign.training.trainer import finetune
from modalign.volumes.mvol import VolumeRecord, read_mvol, write_mvol

QUICK_TSNE = {
    "perplexity": 2.0,
    "iterations": 60,
    "exaggeration_iterations": 20,
    "momentum_switch": 20,
}


@pytest.fixture
def finetuned_path(manifest, tiny_finetune, tmp_path) -> str:
    config = replace(
        tiny_finetune, ablation_flags=AblationFlags(use_pretrained=False)
    )
    path = str(tmp_path / "model.ckpt")
    finetune(manifest, config).write(path)
    return path


@pytest.mark.parametrize("source", ["fusion", "conv"])
def test_export_tsne(source, finetuned_path, phantom_dir, manifest, tmp_path):
    out_path = str(tmp_path / "viz" / "tsne.csv")
    result = export_tsne(
        finetuned_path,
        os.path.join(phantom_dir, "manifest.json"),
        out_path,
        split="train",
        source=source,
        tsne=QUICK_TSNE,
    )
    assert result["source"] == source
    assert result["records"] == len(manifest.entries("train"))
    assert result["image"] is None

    with open(out_path, newline="") as fd:
        rows = list(csv.reader(fd))
    assert rows[0] == ["id", "label", "x", "y"]
    assert len(rows) == result["records"] + 1
    assert {row[1] for row in rows[1:]} <= set(manifest.class_names)
    assert all(np.isfinite(float(row[2])) for row in rows[1:])


def test_export_tsne_image(finetuned_path, phantom_dir, tmp_path):
    pytest.importorskip("matplotlib")
    image_path = str(tmp_path / "tsne.png")
    export_tsne(
        finetuned_path,
        os.path.join(phantom_dir, "manifest.json"),
        str(tmp_path / "tsne.csv"),
        split="train",
        tsne=QUICK_TSNE,
        image_path=image_path,
    )
    assert os.path.getsize(image_path) > 0


def test_export_tsne_rejects_unknown_source(finetuned_path, tmp_path):
    with pytest.raises(InvalidInput):
        export_tsne(
            finetuned_path,
            "manifest.json",
            str(tmp_path / "tsne.csv"),
            source="swin",
        )


def test_export_cam(finetuned_path, manifest, tmp_path):
    entry = manifest.entries("test")[0]
    out_path = str(tmp_path / "maps" / f"{entry.id}-cam.mvol")
    result = export_cam(finetuned_path, manifest.resolve(entry), out_path)

    assert result["class_index"] in (0, 1)
    assert result["class_name"] == manifest.class_names[result["class_index"]]
    cam = read_mvol(out_path)
    source = manifest.read(entry)
    assert cam.modality == CAM_MODALITY
    assert cam.id == f"{entry.id}-cam"
    assert cam.shape == source.shape
    assert cam.labels == source.labels
    assert cam.voxels.min() >= 0.0
    assert cam.voxels.max() <= 1.0

    with open(tmp_path / "maps" / f"{entry.id}-cam-resolved-config.json") as fd:
        resolved = json.load(fd)
    assert resolved["class_index"] == result["class_index"]
    assert resolved["volume_path"] == manifest.resolve(entry)


def test_export_cam_keeps_an_odd_shape(finetuned_path, tmp_path):
    rng = np.random.default_rng(0)
    volume_path = str(tmp_path / "odd.mvol")
    write_mvol(
        VolumeRecord(
            id="odd",
            modality="T2",
            voxels=rng.random((12, 20, 18)),
            report="small lesion",
            labels=(1, 0),
        ),
        volume_path,
    )
    result = export_cam(
        finetuned_path, volume_path, str(tmp_path / "cam.mvol"), 1
    )
    assert result["class_index"] == 1
    assert result["shape"] == [12, 20, 18]


def test_export_cam_rejects_unknown_class(finetuned_path, manifest, tmp_path):
    entry = manifest.entries("test")[0]
    with pytest.raises(InvalidInput):
        export_cam(
            finetuned_path,
            manifest.resolve(entry),
            str(tmp_path / "cam.mvol"),
            class_index=5,
        )
