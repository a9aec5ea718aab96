"""Deterministic synthetic phantom datasets.

Each subject is an ellipsoidal head with three concentric tissue bands.  The
diagnosis label drives both anatomy (the ventricle band dilates with disease
severity) and function (uptake drops inside designated canonical regions),
so the classification and synthesis heads both carry signal.

All randomness is drawn from per-subject and per-session generator streams
keyed by (seed, subject index, session index); regeneration with the same
config is bitwise identical, in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SampleRecord, Volume, write_manifest, write_volume

# tissue intensities before noise
MRI_CORTEX, MRI_WHITE, MRI_VENTRICLE = 0.9, 0.6, 0.2
PET_CORTEX, PET_WHITE, PET_VENTRICLE = 1.0, 0.7, 0.1

NUM_REGIONS = 6
MCI_REGIONS = (0, 1)
AD_REGIONS = (0, 1, 2, 3)

_REGION_OFFSET = 0.21     # region center offset, fraction of each extent
_REGION_RADIUS = 0.10     # region radius, fraction of each extent
_HEAD_RADIUS = 0.42       # head radius, fraction of each extent
_WHITE_FRACTION = 0.68    # white-matter radius relative to the head
_VENTRICLE_FRACTION = 0.26


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    subjects: int = 24
    sessions_per_subject: int = 2
    class_probabilities: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    paired_fraction: float = 0.38
    noise_sigma: float = 0.03
    mci_uptake_factor: float = 0.85
    ad_uptake_factor: float = 0.70
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3:
            raise ValueError(f"dims must be (D, H, W), got {self.dims}")
        if not 0.0 <= self.paired_fraction <= 1.0:
            raise ValueError(f"paired_fraction must be in [0, 1], got {self.paired_fraction}")
        for name in ("mci_uptake_factor", "ad_uptake_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if len(self.class_probabilities) != 3 or abs(sum(self.class_probabilities) - 1) > 1e-9:
            raise ValueError("class_probabilities must be three values summing to 1")
        if self.subjects < 1 or self.sessions_per_subject < 1:
            raise ValueError("need at least one subject and one session")


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise ValueError(f"dims {dims} too small for the region template; need >= 16 per axis")
    return dims


def _ellipsoid_mask(dims, center, radii) -> np.ndarray:
    grids = np.indices(dims, dtype=np.float64)
    rho = sum(((grids[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return rho <= 1.0


def region_masks(dims) -> list[np.ndarray]:
    """The six canonical sub-ellipsoid regions, fixed in volume coordinates."""
    dims = _check_dims(dims)
    center = np.array(dims, dtype=np.float64) / 2.0
    masks = []
    for axis in range(3):
        for sign in (+1, -1):
            c = center.copy()
            c[axis] += sign * _REGION_OFFSET * dims[axis]
            radii = [_REGION_RADIUS * d for d in dims]
            masks.append(_ellipsoid_mask(dims, c, radii))
    return masks


@dataclass
class SubjectGeometry:
    """Per-subject anatomy: jittered head placement and size."""

    center: np.ndarray            # 3 floats, voxels
    head_radii: np.ndarray        # 3 floats, voxels
    label: str


def draw_subject(cfg: PhantomConfig, subject_index: int) -> SubjectGeometry:
    """Label and affine-jittered anatomy from the subject's own stream."""
    rng = np.random.default_rng([cfg.seed, subject_index])
    label = ("CN", "MCI", "AD")[rng.choice(3, p=list(cfg.class_probabilities))]
    dims = np.array(cfg.dims, dtype=np.float64)
    center = dims / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    head = _HEAD_RADIUS * dims * (1.0 + rng.uniform(-0.05, 0.05, size=3))
    return SubjectGeometry(center=center, head_radii=head, label=label)


def _tissue_maps(dims, geom: SubjectGeometry) -> tuple[np.ndarray, np.ndarray]:
    """(mri, pet) noise-free base volumes for the subject's anatomy."""
    atrophy = {"CN": 0.0, "MCI": 1.0, "AD": 2.0}[geom.label]
    head = _ellipsoid_mask(dims, geom.center, geom.head_radii)
    white = _ellipsoid_mask(dims, geom.center, _WHITE_FRACTION * geom.head_radii)
    ventricle = _ellipsoid_mask(dims, geom.center,
                                _VENTRICLE_FRACTION * geom.head_radii + atrophy)
    mri = np.zeros(dims, dtype=np.float64)
    pet = np.zeros(dims, dtype=np.float64)
    for mask, mv, pv in ((head, MRI_CORTEX, PET_CORTEX),
                         (white, MRI_WHITE, PET_WHITE),
                         (ventricle, MRI_VENTRICLE, PET_VENTRICLE)):
        mri[mask] = mv
        pet[mask] = pv
    return mri, pet


def head_mask(dims, geom: SubjectGeometry) -> np.ndarray:
    return _ellipsoid_mask(_check_dims(dims), geom.center, geom.head_radii)


def render_volumes(cfg: PhantomConfig, geom: SubjectGeometry,
                   noise_rng: np.random.Generator | None = None,
                   modulate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(mri, pet) float32 volumes for one session.

    ``modulate=False`` disables the disease uptake modulation while keeping
    the anatomy, which is the reference for the uptake-ratio check.
    """
    dims = _check_dims(cfg.dims)
    mri, pet = _tissue_maps(dims, geom)
    if modulate and geom.label != "CN":
        factor = cfg.mci_uptake_factor if geom.label == "MCI" else cfg.ad_uptake_factor
        regions = MCI_REGIONS if geom.label == "MCI" else AD_REGIONS
        masks = region_masks(dims)
        for r in regions:
            pet[masks[r]] *= factor
    if noise_rng is not None and cfg.noise_sigma > 0:
        mri = mri + noise_rng.normal(0.0, cfg.noise_sigma, size=dims)
        pet = pet + noise_rng.normal(0.0, cfg.noise_sigma, size=dims)
    return mri.astype(np.float32), pet.astype(np.float32)


@dataclass
class PhantomDataset:
    records: list[SampleRecord] = field(default_factory=list)
    manifest_path: Path | None = None


def generate_phantom_dataset(cfg: PhantomConfig, out_dir) -> PhantomDataset:
    """Write every subject/session volume pair plus manifest.csv to out_dir."""
    dims = _check_dims(cfg.dims)
    out = Path(out_dir)
    voldir = out / "volumes"
    voldir.mkdir(parents=True, exist_ok=True)

    records: list[SampleRecord] = []
    for si in range(cfg.subjects):
        geom = draw_subject(cfg, si)
        sid = f"s{si:04d}"
        for sj in range(cfg.sessions_per_subject):
            ses = f"ses{sj:02d}"
            rng = np.random.default_rng([cfg.seed, si, sj])
            paired = rng.uniform() < cfg.paired_fraction
            mri, pet = render_volumes(cfg, geom, noise_rng=rng)
            stem = f"{sid}_{ses}"
            mri_rel = f"volumes/{stem}_mri.vol"
            write_volume(Volume(dims, (1.5, 1.5, 1.5), "MRI", mri, name=stem), out / mri_rel)
            pet_rel = None
            if paired:
                pet_rel = f"volumes/{stem}_pet.vol"
                write_volume(Volume(dims, (1.5, 1.5, 1.5), "PET", pet, name=stem), out / pet_rel)
            records.append(SampleRecord(
                subject_id=sid, session_id=ses, mri_path=mri_rel,
                pet_path=pet_rel, label=geom.label))
    manifest_path = out / "manifest.csv"
    write_manifest(records, manifest_path)
    return PhantomDataset(records=records, manifest_path=manifest_path)
