"""
Synthetic phantoms: noisy volumes with ellipsoidal lesions and a templated
report naming the modality and each planted abnormality.

Every class has its own lesion signature so the task stays separable once
volumes are min-max normalized:

- the long axis of the ellipsoid is `k % 3`
- the lesion is brighter than the background when `(k // 3) % 2 == 0`,
  darker otherwise
- the size tier is `k // 6`
"""

import hashlib
import os
import posixpath
import re
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from typing import List, Sequence, Tuple

import numpy as np

from modalign import get_logger
from modalign.config import PhantomSpec
from modalign.exceptions import InvalidInput
from modalign.types import Split
from modalign.volumes.manifest import DatasetManifest, ManifestEntry
from modalign.volumes.mvol import VolumeRecord, write_mvol

__all__ = [
    "MANIFEST_NAME",
    "OCTANTS",
    "lesion_profile",
    "make_record",
    "record_id",
    "split_for",
    "synthesize_dataset",
]

logger = get_logger()

# (name, half index along D, H, W)
OCTANTS: Tuple[Tuple[str, Tuple[int, int, int]], ...] = tuple(
    (f"{d_name} {h_name} {w_name}", (d, h, w))
    for d, d_name in enumerate(("superior", "inferior"))
    for h, h_name in enumerate(("anterior", "posterior"))
    for w, w_name in enumerate(("left", "right"))
)

VOLUMES_DIR = "volumes"
MANIFEST_NAME = "manifest.json"


def record_id(index: int, modality: str) -> str:
    return f"case{index:05d}-{modality}"


def split_for(identifier: str) -> Split:
    """
    70/15/15 split from the SHA-256 of the record id.
    """
    digest = hashlib.sha256(identifier.encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:8], "big") % 100
    if bucket < 70:
        return "train"
    if bucket < 85:
        return "val"
    return "test"


def lesion_profile(
    grid_size: int,
    center: Sequence[float],
    radii: Sequence[float],
) -> np.ndarray:
    """
    Ellipsoid weight `max(0, 1 - r^2)` sampled at voxel centres, 1 at the
    centre and 0 on and outside the surface.
    """
    axis = np.arange(grid_size, dtype=np.float64) + 0.5
    d, h, w = np.meshgrid(axis, axis, axis, indexing="ij")
    r2 = (
        ((d - center[0]) / radii[0]) ** 2
        + ((h - center[1]) / radii[1]) ** 2
        + ((w - center[2]) / radii[2]) ** 2
    )
    return np.clip(1.0 - r2, 0.0, 1.0)


def _classes_of(spec: PhantomSpec, index: int) -> List[int]:
    first = (index * spec.labels_per_record) % spec.n_classes
    return sorted(
        {(first + j) % spec.n_classes for j in range(spec.labels_per_record)}
    )


def make_record(
    spec: PhantomSpec, class_names: Sequence[str], index: int
) -> VolumeRecord:
    """
    Build record `index` of the dataset. The record only depends on the phantom
    settings and its index, its random stream is seeded with `seed ^ index`.
    """
    rng = np.random.default_rng(spec.seed ^ index)
    grid = spec.grid_size
    modality = spec.modalities[(index // spec.n_classes) % len(spec.modalities)]
    identifier = record_id(index, modality)

    base = spec.base_intensity(modality)
    peak_mean, peak_std = spec.lesion_intensity(modality)
    volume = base + rng.normal(0.0, spec.noise_std, size=(grid,) * 3)

    classes = _classes_of(spec, index)
    octants = rng.permutation(len(OCTANTS))[: len(classes)]
    findings = []
    for k, octant in zip(classes, octants):
        name, halves = OCTANTS[octant]
        quarter = grid / 4.0
        center = [
            half * grid / 2.0 + quarter + rng.uniform(-grid / 16, grid / 16)
            for half in halves
        ]
        short = grid / 10.0 * (1.0 + 0.5 * (k // 6))
        radii = [short * rng.uniform(0.85, 1.15) for _ in range(3)]
        radii[k % 3] *= 2.0

        peak = rng.normal(peak_mean, peak_std)
        contrast = abs(peak - base)
        if (k // 3) % 2:
            contrast = -contrast
        volume += contrast * lesion_profile(grid, center, radii)
        findings.append(f"{class_names[k]} in {name} region")

    labels = [0] * spec.n_classes
    for k in classes:
        labels[k] = 1

    report = f"{modality} sequence shows {' and '.join(findings)}."
    mentions = re.findall(rf"(?<!\w){re.escape(modality)}(?!\w)", report)
    if len(mentions) != 1:
        raise InvalidInput(
            f"Modality '{modality}' also appears as a word of the report "
            "template, pick a name distinct from class and region words"
        )

    return VolumeRecord(
        id=identifier,
        modality=modality,
        voxels=np.clip(volume, 0.0, 1.0).astype(np.float32),
        report=report,
        labels=labels,
        split=split_for(identifier),
    )


def synthesize_dataset(spec: PhantomSpec, out_dir: str) -> DatasetManifest:
    """
    Write `spec.n_records` MVOL files under `<out_dir>/volumes` and the
    manifest at `<out_dir>/manifest.json`. The output tree is a pure
    function of the phantom settings, whatever the number of workers.
    """
    spec.validate()
    class_names = spec.resolved_class_names()

    volumes_dir = os.path.join(out_dir, VOLUMES_DIR)
    os.makedirs(volumes_dir, exist_ok=True)

    build = partial(make_record, spec, class_names)
    indices = range(spec.n_records)
    entries = []
    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        # map() yields in submission order
        for record in pool.map(build, indices):
            relative = posixpath.join(VOLUMES_DIR, f"{record.id}.mvol")
            write_mvol(record, os.path.join(out_dir, relative))
            entries.append(ManifestEntry(record.id, relative, record.split))

    manifest = DatasetManifest(
        class_names=class_names,
        modality_vocabulary=list(spec.modalities),
        records=entries,
        normal_class_policy="explicit",
        root=os.path.abspath(out_dir),
    )
    manifest.save(os.path.join(out_dir, MANIFEST_NAME))
    logger.info(
        f"Synthesized {spec.n_records} phantom records "
        f"({spec.n_classes} classes, {len(spec.modalities)} modalities) "
        f"in '{out_dir}'"
    )
    return manifest
