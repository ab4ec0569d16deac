import json
import os
import posixpath
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from modalign import get_logger
from modalign.exceptions import InvalidInput, VolumeFormatError
from modalign.types import SPLITS, Split
from modalign.volumes.mvol import VolumeRecord, read_mvol

__all__ = ["DatasetManifest", "ManifestEntry", "NORMAL_CLASS_POLICIES"]

logger = get_logger()

NORMAL_CLASS_POLICIES = ("implicit", "explicit")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    split: Split


@dataclass
class DatasetManifest:
    """
    The index of a dataset: class names, modality vocabulary and where each
    record lives. Record paths are stored relative to `root`, the directory
    holding the manifest file.
    """

    class_names: List[str]
    modality_vocabulary: List[str]
    records: List[ManifestEntry]
    normal_class_policy: str = "explicit"
    root: str = field(default=".", compare=False)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class_names": list(self.class_names),
            "modality_vocabulary": list(self.modality_vocabulary),
            "normal_class_policy": self.normal_class_policy,
            "records": [
                {"id": e.id, "path": e.path, "split": e.split}
                for e in self.records
            ],
        }

    @classmethod
    def from_dict(
        cls, document: Dict[str, Any], root: str = "."
    ) -> "DatasetManifest":
        try:
            return cls(
                class_names=list(document["class_names"]),
                modality_vocabulary=list(document["modality_vocabulary"]),
                normal_class_policy=document.get(
                    "normal_class_policy", "explicit"
                ),
                records=[
                    ManifestEntry(r["id"], r["path"], r["split"])
                    for r in document["records"]
                ],
                root=root,
            )
        except (KeyError, TypeError) as e:
            raise InvalidInput(f"Malformed manifest, missing or bad {e}")

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fd:
            json.dump(self.to_dict(), fd, indent=2, sort_keys=True)
            fd.write("\n")
        logger.info(
            f"Manifest with {len(self.records)} records saved to '{path}'"
        )

    @classmethod
    def load(cls, path: str, validate: bool = False) -> "DatasetManifest":
        try:
            with open(path, encoding="utf-8") as fd:
                document = json.load(fd)
        except OSError as e:
            raise InvalidInput(f"Cannot read manifest '{path}': {e.strerror}")
        except ValueError as e:
            raise InvalidInput(f"Manifest '{path}' is not valid JSON: {e}")

        manifest = cls.from_dict(
            document, root=os.path.dirname(os.path.abspath(path))
        )
        if validate:
            manifest.validate()
        return manifest

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, *entry.path.split(posixpath.sep))

    def entries(self, split: Optional[Split] = None) -> List[ManifestEntry]:
        if split is not None and split not in SPLITS:
            raise InvalidInput(
                f"Unknown split '{split}', expected one of {', '.join(SPLITS)}"
            )
        return [e for e in self.records if split is None or e.split == split]

    def entry(self, record_id: str) -> ManifestEntry:
        for e in self.records:
            if e.id == record_id:
                return e
        raise InvalidInput(f"Record '{record_id}' is not in the manifest")

    def read(self, entry: ManifestEntry) -> VolumeRecord:
        return read_mvol(
            self.resolve(entry), split=entry.split, record_id=entry.id
        )

    def load_records(
        self, split: Optional[Split] = None, modality: Optional[str] = None
    ) -> List[VolumeRecord]:
        """
        Read the records of a split, optionally keeping a single modality.
        Records come back in manifest order.
        """
        if modality is not None and modality not in self.modality_vocabulary:
            raise InvalidInput(
                f"Modality '{modality}' is not in the manifest vocabulary "
                f"({', '.join(self.modality_vocabulary)})"
            )
        records = [self.read(e) for e in self.entries(split)]
        if modality is not None:
            records = [r for r in records if r.modality == modality]
        return records

    def validate(self) -> None:
        """
        Check the manifest and every record it references. Raises
        `InvalidInput` on the first problem found.
        """
        if not self.modality_vocabulary:
            raise InvalidInput("Manifest modality vocabulary is empty")
        if self.class_count < 1:
            raise InvalidInput("Manifest declares no class")
        if self.normal_class_policy not in NORMAL_CLASS_POLICIES:
            raise InvalidInput(
                f"Unknown normal class policy '{self.normal_class_policy}'"
            )

        duplicates = [
            i for i, n in Counter(e.id for e in self.records).items() if n > 1
        ]
        if duplicates:
            raise InvalidInput(
                "Duplicate record ids in manifest: "
                f"{', '.join(sorted(duplicates))}"
            )

        for entry in self.records:
            path = self.resolve(entry)
            if not os.path.isfile(path):
                raise InvalidInput(
                    f"Record '{entry.id}' points at missing file '{path}'"
                )
            try:
                record = self.read(entry)
            except VolumeFormatError as e:
                raise InvalidInput(f"Record '{entry.id}' does not parse: {e}")
            record.validate(
                class_count=self.class_count,
                modalities=self.modality_vocabulary,
                normal_class_policy=self.normal_class_policy,
            )
        logger.debug(f"Manifest with {len(self.records)} records is valid")
