"""Preprocessing chain: trilinear resampling, percentile clipping,
[0, 1] normalization and labeled slice extraction.

The chain runs in the fixed order resample -> clip -> normalize; masks
are resampled nearest-neighbor so they stay binary. Percentiles use
type-7 (linear) interpolation throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .volume import LesionMask, Volume

log = logging.getLogger(__name__)


@dataclass
class SliceSample:
    """One 2D slice with its binary lesion label and provenance."""

    image: np.ndarray          # (H, W) float32
    label: int                 # 1 iff the mask is positive anywhere in the slice
    patient_id: str
    view: str
    index: int


@dataclass
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (0.5, 0.5, 3.6)
    clip_percentiles: tuple[float, float] = (1.0, 99.0)
    slice_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        lo, hi = self.clip_percentiles
        if not (0 <= lo < hi <= 100):
            raise ValueError(f"clip_percentiles out of order: {self.clip_percentiles}")
        if any(s <= 0 for s in self.target_spacing):
            raise ValueError("target_spacing must be positive")
        if any(n < 1 for n in self.slice_size):
            raise ValueError("slice_size must be positive")


def _resample_grid(extents, spacing_in, spacing_out):
    """Output extents and per-axis fractional input coordinates (clamped)."""
    out_extents = []
    coords = []
    for n, si, so in zip(extents, spacing_in, spacing_out):
        m = max(1, round(n * si / so))
        out_extents.append(m)
        u = np.arange(m) * so / si
        coords.append(np.clip(u, 0.0, n - 1))
    return tuple(out_extents), coords


def resample_trilinear(v: Volume, target_spacing) -> Volume:
    """Resample onto ``target_spacing`` by trilinear interpolation.

    Output voxel i sits at physical i*spacing_out per axis; sample points
    outside the input grid clamp to the boundary.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if v.spacing == target_spacing:
        return Volume(v.voxels.copy(), v.spacing, v.patient_id, v.view)
    _, coords = _resample_grid(v.extents, v.spacing, target_spacing)

    lo = [np.floor(c).astype(np.intp) for c in coords]
    hi = [np.minimum(l + 1, n - 1) for l, n in zip(lo, v.extents)]
    w = [(c - l).astype(np.float64) for c, l in zip(coords, lo)]

    vox = v.voxels.astype(np.float64)
    out = np.zeros([len(c) for c in coords])
    for bx, ix, wx in ((0, lo[0], 1 - w[0]), (1, hi[0], w[0])):
        for by, iy, wy in ((0, lo[1], 1 - w[1]), (1, hi[1], w[1])):
            for bz, iz, wz in ((0, lo[2], 1 - w[2]), (1, hi[2], w[2])):
                weight = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                out += weight * vox[np.ix_(ix, iy, iz)]
    return Volume(out.astype(np.float32), target_spacing, v.patient_id, v.view)


def resample_mask_nearest(m: LesionMask, target_spacing) -> LesionMask:
    """Nearest-neighbor mask resampling (threshold 0.5 equivalent)."""
    target_spacing = tuple(float(s) for s in target_spacing)
    if m.spacing == target_spacing:
        return LesionMask(m.voxels.copy(), m.spacing, m.patient_id, m.view)
    _, coords = _resample_grid(m.voxels.shape, m.spacing, target_spacing)
    idx = [np.clip(np.round(c).astype(np.intp), 0, n - 1) for c, n in zip(coords, m.voxels.shape)]
    return LesionMask(m.voxels[np.ix_(*idx)], target_spacing, m.patient_id, m.view)


def clip_percentiles(v: Volume, low: float = 1.0, high: float = 99.0) -> Volume:
    """Winsorize at the per-volume type-7 low/high percentile values."""
    if not (0 <= low < high <= 100):
        raise ValueError(f"invalid percentile pair ({low}, {high})")
    qlo, qhi = np.percentile(v.voxels.astype(np.float64), [low, high], method="linear")
    vox = np.clip(v.voxels, qlo, qhi).astype(np.float32)
    return Volume(vox, v.spacing, v.patient_id, v.view)


def normalize_unit(v: Volume) -> Volume:
    """(x - min) / (max - min); constant volumes map to all zeros."""
    vmin = float(v.voxels.min())
    vmax = float(v.voxels.max())
    if vmax == vmin:
        log.warning("normalize_unit: constant volume for %s/%s, mapping to zeros",
                    v.patient_id, v.view)
        vox = np.zeros_like(v.voxels)
    else:
        vox = ((v.voxels.astype(np.float64) - vmin) / (vmax - vmin)).astype(np.float32)
    return Volume(vox, v.spacing, v.patient_id, v.view)


def center_crop_pad(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Center-crop and/or zero-pad a 2D array to ``size``."""
    out = np.zeros(size, dtype=img.dtype)
    h, w = img.shape
    th, tw = size
    # source window
    sh0 = max(0, (h - th) // 2)
    sw0 = max(0, (w - tw) // 2)
    sh1 = min(h, sh0 + th)
    sw1 = min(w, sw0 + tw)
    # destination window
    dh0 = max(0, (th - h) // 2)
    dw0 = max(0, (tw - w) // 2)
    out[dh0 : dh0 + (sh1 - sh0), dw0 : dw0 + (sw1 - sw0)] = img[sh0:sh1, sw0:sw1]
    return out


def extract_labeled_slices(
    v: Volume, mask: LesionMask | None, slice_size: tuple[int, int], axis: int = 2
) -> list[SliceSample]:
    """One SliceSample per index along ``axis``; label 1 iff the mask is
    positive anywhere in that slice. ``mask=None`` means all labels 0."""
    if mask is not None and mask.voxels.shape != v.voxels.shape:
        raise ValueError(
            f"extract_labeled_slices: mask extents {mask.voxels.shape} "
            f"!= volume extents {v.voxels.shape}"
        )
    samples = []
    for k in range(v.voxels.shape[axis]):
        img = np.take(v.voxels, k, axis=axis)
        label = 0
        if mask is not None:
            label = int(np.take(mask.voxels, k, axis=axis).any())
        samples.append(
            SliceSample(
                image=center_crop_pad(img, tuple(slice_size)),
                label=label,
                patient_id=v.patient_id,
                view=v.view,
                index=k,
            )
        )
    return samples


def preprocess_volume(
    v: Volume, mask: LesionMask | None, config: PreprocessConfig
) -> tuple[Volume, LesionMask | None]:
    """Full chain on one view volume: resample -> clip -> normalize."""
    out = resample_trilinear(v, config.target_spacing)
    out = clip_percentiles(out, *config.clip_percentiles)
    out = normalize_unit(out)
    out_mask = None
    if mask is not None:
        out_mask = resample_mask_nearest(mask, config.target_spacing)
    return out, out_mask
