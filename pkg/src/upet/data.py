"""Volume I/O, normalization, cropping, manifests and subject-level splits.

Volumes live on disk as a raw little-endian float32 payload (``<stem>.vol``)
next to a JSON sidecar header (``<stem>.vol.json``) carrying dims, voxel
size, modality and dtype.  The round trip is bitwise exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODALITIES = ("MRI", "PET", "ATTN")


class VolumeFormatError(ValueError):
    """Malformed volume file: bad header, bad dtype, or payload size mismatch."""


class ManifestError(ValueError):
    """Malformed dataset manifest."""


@dataclass
class Volume:
    """A 3D scalar field with voxel geometry and a modality tag."""

    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    modality: str
    elements: np.ndarray                     # float32, shape == dims, row-major
    name: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if any(v <= 0 for v in self.voxel_size_mm):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size_mm}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        self.elements = np.ascontiguousarray(self.elements, dtype=np.float32)
        if self.elements.shape != self.dims:
            raise ValueError(f"elements shape {self.elements.shape} != dims {self.dims}")


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_volume(volume: Volume, path) -> None:
    """Write payload to ``path`` and the JSON header to ``path + '.json'``."""
    path = Path(path)
    header = {
        "dims": list(volume.dims),
        "voxel_size_mm": list(volume.voxel_size_mm),
        "modality": volume.modality,
        "dtype": "f32le",
    }
    if volume.name:
        header["name"] = volume.name
    path.write_bytes(volume.elements.astype("<f4", copy=False).tobytes())
    _header_path(path).write_text(json.dumps(header, indent=0) + "\n")


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume payload not found: {path}")
    hp = _header_path(path)
    if not hp.exists():
        raise VolumeFormatError(f"missing sidecar header: {hp}")
    try:
        header = json.loads(hp.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"unparseable header {hp}: {exc}") from None
    for key in ("dims", "voxel_size_mm", "modality", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"header {hp} lacks required key {key!r}")
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"unknown dtype {header['dtype']!r}; only f32le is supported")
    dims = tuple(int(d) for d in header["dims"])
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload size mismatch for {path}: header implies {expected} bytes, file has {len(payload)}")
    elements = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Volume(dims=dims, voxel_size_mm=tuple(header["voxel_size_mm"]),
                  modality=header["modality"], elements=elements,
                  name=header.get("name", ""))


def zscore_normalize(v: Volume) -> tuple[Volume, bool]:
    """Shift/scale to zero mean, unit std.

    A volume with std below 1e-8 comes back as all zeros with the warning
    flag set.
    """
    data = v.elements.astype(np.float64)
    std = data.std()
    if std < 1e-8:
        out = np.zeros_like(v.elements)
        degenerate = True
    else:
        out = ((data - data.mean()) / std).astype(np.float32)
        degenerate = False
    return Volume(v.dims, v.voxel_size_mm, v.modality, out, v.name), degenerate


def center_crop_or_pad(v: Volume, target_dims) -> Volume:
    """Center-crop larger axes, zero-pad smaller ones; odd surplus goes to
    the high-index side."""
    target = tuple(int(d) for d in target_dims)
    if len(target) != 3 or any(d < 1 for d in target):
        raise ValueError(f"target dims must be three positive ints, got {target_dims}")
    data = v.elements
    for axis in range(3):
        cur = data.shape[axis]
        want = target[axis]
        if cur > want:
            lo = (cur - want) // 2
            data = np.take(data, range(lo, lo + want), axis=axis)
        elif cur < want:
            lo = (want - cur) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (lo, want - cur - lo)
            data = np.pad(data, pad)
    return Volume(target, v.voxel_size_mm, v.modality, np.ascontiguousarray(data), v.name)


@dataclass(frozen=True)
class SampleRecord:
    """One study: ids, volume paths (PET optional) and the diagnosis label."""

    subject_id: str
    session_id: str
    mri_path: str
    pet_path: str | None
    label: str

    def __post_init__(self):
        if self.label not in ("CN", "MCI", "AD"):
            raise ValueError(f"label must be CN, MCI or AD, got {self.label!r}")


MANIFEST_HEADER = ["subject_id", "session_id", "mri_path", "pet_path", "label"]


def write_manifest(records: list[SampleRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.subject_id, r.session_id, r.mri_path, r.pet_path or "", r.label])


def read_manifest(path) -> list[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"empty manifest: {path}") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"bad manifest header {header}; expected {MANIFEST_HEADER}")
        records = []
        seen: set[tuple[str, str]] = set()
        for i, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ManifestError(f"{path}:{i}: expected 5 fields, got {len(row)}")
            key = (row[0], row[1])
            if key in seen:
                raise ManifestError(f"{path}:{i}: duplicate (subject_id, session_id) {key}")
            seen.add(key)
            records.append(SampleRecord(
                subject_id=row[0], session_id=row[1], mri_path=row[2],
                pet_path=row[3] or None, label=row[4]))
    return records


@dataclass
class SplitSpec:
    """Disjoint train/val/test subject-id sets covering all subjects."""

    train: set[str]
    val: set[str]
    test: set[str]
    ratios: tuple[float, float, float]
    seed: int

    def split_of(self, subject_id: str) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        raise KeyError(f"subject {subject_id!r} is in no split")

    def to_dict(self) -> dict:
        return {"train": sorted(self.train), "val": sorted(self.val),
                "test": sorted(self.test), "ratios": list(self.ratios), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(train=set(d["train"]), val=set(d["val"]), test=set(d["test"]),
                   ratios=tuple(d["ratios"]), seed=int(d["seed"]))


def subject_level_split(subject_ids, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> SplitSpec:
    """Shuffle subjects with a seeded generator and allocate by floor counts,
    remainders going to train, then val, then test."""
    ids = list(subject_ids)
    subjects = sorted(set(ids))
    if len(subjects) != len(ids):
        raise ValueError("duplicate subject ids passed to subject_level_split")
    if len(ratios) != 3:
        raise ValueError(f"need (train, val, test) ratios, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    if len(subjects) < 3:
        raise ValueError(f"need at least 3 subjects to split, got {len(subjects)}")

    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    counts = [int(np.floor(n * r)) for r in ratios]
    remainder = n - sum(counts)
    for i in range(remainder):
        counts[i % 3] += 1
    train = set(order[:counts[0]])
    val = set(order[counts[0]:counts[0] + counts[1]])
    test = set(order[counts[0] + counts[1]:])
    return SplitSpec(train=train, val=val, test=test, ratios=tuple(ratios), seed=seed)


LABEL_TO_INDEX = {"CN": 0, "MCI": 1, "AD": 2}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}


@dataclass
class LoadedSample:
    """A study pulled into memory, normalized and cropped for the network."""

    subject_id: str
    session_id: str
    mri: np.ndarray                  # (1, D, H, W) float32, z-scored
    pet: np.ndarray | None           # (1, D, H, W) float32 or None
    label: int


def load_samples(manifest: list[SampleRecord], base_dir, subject_ids,
                 input_shape) -> list[LoadedSample]:
    """Load, z-score and crop/pad every record whose subject is selected."""
    base = Path(base_dir)
    wanted = set(subject_ids)
    out = []
    for rec in manifest:
        if rec.subject_id not in wanted:
            continue
        mri_vol = read_volume(base / rec.mri_path)
        mri_vol, _ = zscore_normalize(mri_vol)
        mri_vol = center_crop_or_pad(mri_vol, input_shape)
        pet = None
        if rec.pet_path:
            pet_vol = center_crop_or_pad(read_volume(base / rec.pet_path), input_shape)
            pet = pet_vol.elements[None]
        out.append(LoadedSample(
            subject_id=rec.subject_id, session_id=rec.session_id,
            mri=mri_vol.elements[None], pet=pet, label=LABEL_TO_INDEX[rec.label]))
    return out
