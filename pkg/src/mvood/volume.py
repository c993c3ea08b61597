"""Volume data model, on-disk format, manifests and the synthetic phantom.

Volumes are stored as a JSON sidecar header (extents, spacing in mm,
patient id, view) next to a little-endian float32 raw blob; a manifest
is a CSV listing one (patient, view) volume per row. The phantom
generator produces a deterministic multi-view cohort: a smooth
ellipsoidal "organ" with band-limited texture, and for a configurable
fraction of patients one bright spherical lesion fully inside the organ.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VIEWS = ("axial", "coronal", "sagittal")


@dataclass
class Volume:
    """3D scalar field with voxel spacing; axis 2 is the slice axis."""

    voxels: np.ndarray                      # (nx, ny, nz) float32
    spacing: tuple[float, float, float]     # mm, strictly positive
    patient_id: str
    view: str = "volume3d"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"Volume: voxels must be 3D, got {self.voxels.ndim}D")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"Volume: spacing must be 3 positive values, got {self.spacing}")
        if self.view not in VIEWS + ("volume3d",):
            raise ValueError(f"Volume: unknown view {self.view!r}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LesionMask:
    """Binary mask sharing its Volume's grid."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    patient_id: str
    view: str = "volume3d"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels).astype(np.uint8)
        if not np.isin(self.voxels, (0, 1)).all():
            raise ValueError("LesionMask: voxels must be binary")
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass
class PhantomSpec:
    """Parameters of the deterministic synthetic cohort."""

    n_patients: int = 60
    extents: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (0.6, 0.6, 2.0)
    lesion_fraction: float = 0.5
    lesion_radius_mm: float = 3.0
    lesion_contrast: float = 0.35
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lesion_fraction <= 1.0:
            raise ValueError("PhantomSpec: lesion_fraction must be in [0, 1]")
        physical = [n * s for n, s in zip(self.extents, self.spacing)]
        if self.lesion_radius_mm >= min(physical) / 2:
            raise ValueError("PhantomSpec: lesion radius too large for the grid")


@dataclass
class ManifestRecord:
    patient_id: str
    view: str
    volume_path: str
    mask_path: str = ""
    split: str = ""


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        keys = [(r.patient_id, r.view) for r in self.records]
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        if dupes:
            raise ValueError(f"Manifest: duplicate (patient_id, view) entries: {dupes}")

    def __len__(self) -> int:
        return len(self.records)

    def patients(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.patient_id, None)
        return list(seen)


# ---------------------------------------------------------------------------
# volume file format
# ---------------------------------------------------------------------------

def save_volume(v: Volume | LesionMask, path) -> None:
    """Write ``<path>.json`` (header) and ``<path>.raw`` (LE float32 blob)."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "extents": list(v.voxels.shape),
        "spacing": list(v.spacing),
        "patient_id": v.patient_id,
        "view": v.view,
        "kind": "mask" if isinstance(v, LesionMask) else "volume",
    }
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, sort_keys=True)
    np.ascontiguousarray(v.voxels, dtype="<f4").tofile(base.with_suffix(".raw"))


def load_volume(path) -> Volume | LesionMask:
    base = Path(path)
    try:
        with open(base.with_suffix(".json")) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{base}: malformed header: {exc}") from exc
    for key in ("extents", "spacing", "patient_id", "view"):
        if key not in header:
            raise ValueError(f"{base}: header missing field {key!r}")
    extents = tuple(header["extents"])
    raw = np.fromfile(base.with_suffix(".raw"), dtype="<f4")
    expected = int(np.prod(extents))
    if raw.size != expected:
        raise ValueError(
            f"{base}: byte count mismatch: extents {extents} imply "
            f"{expected} voxels, blob holds {raw.size}"
        )
    voxels = raw.reshape(extents).astype(np.float32)
    if header.get("kind") == "mask":
        return LesionMask(voxels, tuple(header["spacing"]), header["patient_id"], header["view"])
    return Volume(voxels, tuple(header["spacing"]), header["patient_id"], header["view"])


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def _organ_region(extents, spacing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean ellipsoid mask plus (center, semi-axes) in mm."""
    physical = np.array([n * s for n, s in zip(extents, spacing)])
    center = physical / 2.0
    semi = 0.38 * physical
    grids = np.meshgrid(
        *[(np.arange(n) + 0.5) * s for n, s in zip(extents, spacing)], indexing="ij"
    )
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
    return q <= 1.0, center, semi


def sphere_mask(extents, spacing, center, radius) -> np.ndarray:
    """Boolean mask of voxels whose physical center lies within ``radius`` mm."""
    grids = np.meshgrid(
        *[(np.arange(n) + 0.5) * s for n, s in zip(extents, spacing)], indexing="ij"
    )
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return dist2 <= radius**2


def generate_phantom(spec: PhantomSpec) -> list[tuple[Volume, LesionMask]]:
    """Deterministic synthetic cohort; identical spec -> identical bytes."""
    master = np.random.SeedSequence(spec.seed)
    order_rng = np.random.default_rng(master.spawn(1)[0])
    n_lesion = round(spec.n_patients * spec.lesion_fraction)
    lesion_ids = set(order_rng.permutation(spec.n_patients)[:n_lesion].tolist())

    organ, center, semi = _organ_region(spec.extents, spec.spacing)
    grids = np.meshgrid(
        *[(np.arange(n) + 0.5) * s for n, s in zip(spec.extents, spec.spacing)],
        indexing="ij",
    )

    out = []
    for i in range(spec.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(1, i)))
        vox = np.full(spec.extents, 0.05, dtype=np.float64)
        texture = np.full(spec.extents, 0.5, dtype=np.float64)
        for _ in range(3):
            freqs = rng.uniform(0.2, 1.2, size=3)     # cycles per physical extent
            phases = rng.uniform(0, 2 * math.pi, size=3)
            amp = rng.uniform(0.04, 0.10)
            mode = amp
            for g, f, ph, ext in zip(grids, freqs, phases, [n * s for n, s in zip(spec.extents, spec.spacing)]):
                mode = mode * np.cos(2 * math.pi * f * g / ext + ph)
            texture += mode
        vox[organ] = texture[organ]

        mask = np.zeros(spec.extents, dtype=np.uint8)
        if i in lesion_ids:
            c = _sample_lesion_center(rng, center, semi, spec.lesion_radius_mm)
            blob = sphere_mask(spec.extents, spec.spacing, c, spec.lesion_radius_mm)
            vox[blob] += spec.lesion_contrast
            mask[blob] = 1

        vox += rng.normal(0.0, spec.noise_sigma, size=spec.extents)
        vox = np.clip(vox, 0.0, 1.0)
        pid = f"P{i:03d}"
        out.append(
            (
                Volume(vox.astype(np.float32), spec.spacing, pid, "volume3d"),
                LesionMask(mask, spec.spacing, pid, "volume3d"),
            )
        )
    return out


def _sample_lesion_center(rng, center, semi, radius) -> np.ndarray:
    """Rejection-sample a blob center whose full sphere fits in the organ.

    The acceptance test bounds the ellipsoid quadratic form over the whole
    sphere, so every accepted center keeps all lesion voxels inside.
    """
    for _ in range(10_000):
        c = center + rng.uniform(-1, 1, size=3) * semi
        if sum(((abs(cc - c0) + radius) / a) ** 2 for cc, c0, a in zip(c, center, semi)) <= 1.0:
            return c
    raise RuntimeError("lesion placement: rejection sampling failed (radius too large?)")


# ---------------------------------------------------------------------------
# orthogonal reslicing
# ---------------------------------------------------------------------------

_VIEW_AXES = {
    # view -> axis order of the original (x, y, z) grid, slice axis last
    "axial": (0, 1, 2),
    "coronal": (0, 2, 1),
    "sagittal": (1, 2, 0),
}


def reslice_views(v: Volume) -> tuple[Volume, Volume, Volume]:
    """Restack one 3D grid into axial/coronal/sagittal view volumes.

    Pure transposition; the voxel multiset is identical across views and
    spacing is permuted to match each view's axes (slice axis last).
    """
    out = []
    for view in VIEWS:
        axes = _VIEW_AXES[view]
        vox = np.ascontiguousarray(np.transpose(v.voxels, axes))
        spacing = tuple(v.spacing[a] for a in axes)
        out.append(Volume(vox, spacing, v.patient_id, view))
    return tuple(out)


def reslice_mask_views(m: LesionMask) -> tuple[LesionMask, LesionMask, LesionMask]:
    out = []
    for view in VIEWS:
        axes = _VIEW_AXES[view]
        vox = np.ascontiguousarray(np.transpose(m.voxels, axes))
        spacing = tuple(m.spacing[a] for a in axes)
        out.append(LesionMask(vox, spacing, m.patient_id, view))
    return tuple(out)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["patient_id", "view", "volume_path", "mask_path", "split"]


def write_manifest(m: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in m.records:
            writer.writerow([r.patient_id, r.view, r.volume_path, r.mask_path, r.split])


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: bad manifest header {header}")
        for row in reader:
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{path}: malformed row {row}")
            records.append(ManifestRecord(*row))
    missing = []
    if check_files:
        for r in records:
            for p in (r.volume_path, r.mask_path):
                if p and not Path(p).with_suffix(".json").exists():
                    missing.append(p)
    if missing:
        raise FileNotFoundError(f"{path}: referenced files missing: {sorted(set(missing))}")
    return Manifest(records)
