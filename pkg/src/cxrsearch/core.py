"""Domain types, dataset manifests and stratified splitting.

A manifest is a JSON document listing every image with its label, split
assignment, site tag and optional clinical record.  Image pixels live in
separate PNG/JPEG files referenced by path; the manifest stays small and
human-diffable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DuplicateId, InsufficientClassCount, MissingFile, ParseError

MANIFEST_VERSION = 1


class ClassLabel(Enum):
    """Ternary diagnosis label with a fixed total order for tie-breaking."""

    Control = 0
    NonCovidPneumonia = 1
    Covid19 = 2

    def __lt__(self, other: "ClassLabel") -> bool:
        return self.value < other.value

    @property
    def json_name(self) -> str:
        return _LABEL_TO_JSON[self]

    @classmethod
    def from_json(cls, name: str) -> "ClassLabel":
        try:
            return _JSON_TO_LABEL[name]
        except KeyError:
            raise ParseError(f"unknown label {name!r}") from None


_LABEL_TO_JSON = {
    ClassLabel.Control: "control",
    ClassLabel.NonCovidPneumonia: "pneumonia",
    ClassLabel.Covid19: "covid19",
}
_JSON_TO_LABEL = {v: k for k, v in _LABEL_TO_JSON.items()}

ALL_LABELS = tuple(sorted(ClassLabel, key=lambda c: c.value))


@dataclass(frozen=True)
class ClinicalRecord:
    """Per-patient metadata shown alongside retrieved images.

    Absent values are None; JSON encodes absence by omitting the field.
    """

    age: Optional[float] = None
    sex: str = "unknown"
    rale: Optional[int] = None
    spo2: Optional[float] = None
    wbc: Optional[float] = None
    icu: Optional[bool] = None

    def __post_init__(self):
        if self.sex not in ("M", "F", "unknown"):
            raise ParseError(f"invalid sex {self.sex!r}")
        if self.rale is not None and not (0 <= self.rale <= 48):
            raise ParseError(f"rale {self.rale} outside [0, 48]")
        if self.spo2 is not None and not (0 <= self.spo2 <= 100):
            raise ParseError(f"spo2 {self.spo2} outside [0, 100]")

    def to_json(self) -> dict:
        out: dict = {"sex": self.sex}
        if self.age is not None:
            out["age"] = self.age
        if self.rale is not None:
            out["rale"] = int(self.rale)
        if self.spo2 is not None:
            out["spo2"] = self.spo2
        if self.wbc is not None:
            out["wbc"] = self.wbc
        if self.icu is not None:
            out["icu"] = bool(self.icu)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ClinicalRecord":
        if not isinstance(obj, dict):
            raise ParseError("clinical record must be an object")
        try:
            return cls(
                age=obj.get("age"),
                sex=obj.get("sex", "unknown"),
                rale=obj.get("rale"),
                spo2=obj.get("spo2"),
                wbc=obj.get("wbc"),
                icu=obj.get("icu"),
            )
        except TypeError as exc:
            raise ParseError(f"bad clinical record: {exc}") from None


@dataclass(frozen=True)
class ImageRecord:
    """One radiograph: identity, file location, label, split and metadata."""

    id: str
    path: str
    label: ClassLabel
    split: str = "train"
    site: str = ""
    clinical: Optional[ClinicalRecord] = None

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ParseError(f"invalid split {self.split!r}")

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "path": self.path,
            "label": self.label.json_name,
            "split": self.split,
            "site": self.site,
        }
        if self.clinical is not None:
            out["clinical"] = self.clinical.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        for key in ("id", "path", "label"):
            if key not in obj:
                raise ParseError(f"image record missing {key!r}")
        clinical = None
        if "clinical" in obj:
            clinical = ClinicalRecord.from_json(obj["clinical"])
        return cls(
            id=str(obj["id"]),
            path=str(obj["path"]),
            label=ClassLabel.from_json(obj["label"]),
            split=obj.get("split", "train"),
            site=str(obj.get("site", "")),
            clinical=clinical,
        )


@dataclass
class DatasetManifest:
    version: int = MANIFEST_VERSION
    images: list[ImageRecord] = field(default_factory=list)

    def records(self, split: Optional[str] = None) -> list[ImageRecord]:
        if split is None:
            return list(self.images)
        return [r for r in self.images if r.split == split]

    def by_label(self, split: Optional[str] = None) -> dict[ClassLabel, list[ImageRecord]]:
        out: dict[ClassLabel, list[ImageRecord]] = {c: [] for c in ALL_LABELS}
        for rec in self.records(split):
            out[rec.label].append(rec)
        return out

    def label_counts(self, split: Optional[str] = None) -> dict[ClassLabel, int]:
        return {c: len(v) for c, v in self.by_label(split).items()}

    def to_json(self) -> dict:
        return {"version": self.version, "images": [r.to_json() for r in self.images]}


def _check_unique_ids(images: list[ImageRecord]) -> None:
    seen: set[str] = set()
    for rec in images:
        if rec.id in seen:
            raise DuplicateId(f"duplicate image id {rec.id!r}")
        seen.add(rec.id)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Relative image paths are resolved against the manifest's directory so
    the loaded records are usable from any working directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise MissingFile(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or "images" not in raw or not isinstance(raw["images"], list):
        raise ParseError(f"manifest {path} does not match the manifest schema")

    base = path.parent
    images = []
    for obj in raw["images"]:
        rec = ImageRecord.from_json(obj)
        resolved = Path(rec.path)
        if not resolved.is_absolute():
            resolved = base / resolved
        if not resolved.exists():
            raise MissingFile(f"image file {resolved} (record {rec.id!r}) does not exist")
        images.append(replace(rec, path=str(resolved)))
    _check_unique_ids(images)
    return DatasetManifest(version=int(raw.get("version", MANIFEST_VERSION)), images=images)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest to JSON. Paths are written exactly as stored."""
    path = Path(path)
    _check_unique_ids(manifest.images)
    path.write_text(json.dumps(manifest.to_json(), indent=2))
    return path


def split_stratified(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> DatasetManifest:
    """Reassign train/val splits, stratified by class and (when present) site.

    Per-class validation counts equal round(class_count * val_fraction);
    within a class the quota is spread over site groups by largest
    remainder so every site appears on both sides where possible.
    """
    if not (0 < val_fraction < 1):
        raise ValueError(f"val_fraction {val_fraction} outside (0, 1)")
    rng = np.random.default_rng(seed)

    assignment: dict[str, str] = {}
    for label, recs in manifest.by_label().items():
        if len(recs) < 2:
            raise InsufficientClassCount(
                f"class {label.name} has {len(recs)} record(s); need >= 2"
            )
        n_val = int(round(len(recs) * val_fraction))

        groups: dict[str, list[ImageRecord]] = {}
        for rec in recs:
            groups.setdefault(rec.site, []).append(rec)
        site_names = sorted(groups)

        quotas = {s: len(groups[s]) * val_fraction for s in site_names}
        taken = {s: min(int(np.floor(quotas[s])), len(groups[s])) for s in site_names}
        # distribute the remainder by largest fractional part, site name breaking ties
        while sum(taken.values()) < n_val:
            candidates = [s for s in site_names if taken[s] < len(groups[s])]
            if not candidates:
                break
            best = max(candidates, key=lambda s: (quotas[s] - taken[s], s))
            taken[best] += 1
        while sum(taken.values()) > n_val:
            candidates = [s for s in site_names if taken[s] > 0]
            worst = min(candidates, key=lambda s: (quotas[s] - taken[s], s))
            taken[worst] -= 1

        for site in site_names:
            members = sorted(groups[site], key=lambda r: r.id)
            order = rng.permutation(len(members))
            chosen = {members[i].id for i in order[: taken[site]]}
            for rec in members:
                assignment[rec.id] = "val" if rec.id in chosen else "train"

    images = [replace(rec, split=assignment[rec.id]) for rec in manifest.images]
    return DatasetManifest(version=manifest.version, images=images)
