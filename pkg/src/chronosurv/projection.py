"""Tissue-wise PET/CT intensity projections.

Volumes are indexed ``(z, y, x)``: z runs cranio-caudal, y anterior-posterior,
x left-right.  A coronal projection collapses y and yields a ``(z, x)`` image,
a sagittal projection collapses x and yields ``(z, y)``.

HU thresholds leave two gaps on purpose: voxels with ``150 < HU < 200`` or
``-30 < HU < -29`` belong to no tissue class and therefore never contribute to
a tissue channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

CANVAS = (400, 256)
COLLAGE_SHAPE = (12, 400, 512)
TISSUES = ("bone", "lean", "adipose", "air")
CHANNEL_ORDER = (
    "pet_mip_orig",
    "pet_mip_bone",
    "pet_mip_lean",
    "pet_mip_adipose",
    "pet_mip_air",
    "ct_aip_orig",
    "ct_aip_bone",
    "ct_aip_lean",
    "ct_aip_adipose",
    "ct_aip_air",
    "seg_mip",
    "seg_aip",
)
_AXES = {"coronal": 1, "sagittal": 2}


@dataclass
class VolumeSet:
    hu: np.ndarray
    suv: np.ndarray
    tumor_mask: np.ndarray
    spacing_mm: tuple = (2.04, 2.04, 3.0)

    def validate(self):
        shapes = {self.hu.shape, self.suv.shape, self.tumor_mask.shape}
        if len(shapes) != 1 or self.hu.ndim != 3:
            raise InvalidInputError(
                f"hu/suv/mask shapes differ: {self.hu.shape}, {self.suv.shape}, {self.tumor_mask.shape}"
            )
        if np.any(self.suv < 0):
            raise InvalidInputError("SUV must be non-negative")
        if not np.isin(self.tumor_mask, (0, 1)).all():
            raise InvalidInputError("tumor mask must be binary")
        return self


@dataclass
class TissueMasks:
    bone: np.ndarray
    lean: np.ndarray
    adipose: np.ndarray
    air: np.ndarray

    def as_tuple(self):
        return (self.bone, self.lean, self.adipose, self.air)


@dataclass
class ProjectionCollage:
    channels: np.ndarray
    channel_order: tuple = CHANNEL_ORDER


def tissue_partition(hu) -> TissueMasks:
    hu = np.asarray(hu)
    return TissueMasks(
        bone=hu >= 200,
        lean=(hu >= -29) & (hu <= 150),
        adipose=(hu >= -190) & (hu <= -30),
        air=hu < -190,
    )


def _axis(axis) -> int:
    try:
        return _AXES[axis]
    except KeyError:
        raise InvalidInputError(f"axis must be 'coronal' or 'sagittal', got {axis!r}") from None


def mip(vol, axis="coronal", mask=None):
    """Maximum intensity projection.

    With ``mask``, voxels outside it are ignored; columns with no masked voxel
    project to 0.
    """
    vol = np.asarray(vol, dtype=np.float64)
    ax = _axis(axis)
    if vol.ndim != 3 or vol.shape[ax] == 0 or vol.size == 0:
        raise InvalidInputError(f"cannot project volume of shape {vol.shape} along {axis}")
    if mask is None:
        return vol.max(axis=ax)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.shape:
        raise InvalidInputError("mask and volume shapes differ")
    out = np.where(mask, vol, -np.inf).max(axis=ax)
    out[~mask.any(axis=ax)] = 0.0
    return out


def _ordered_sum(vol, ax):
    # slice-by-slice accumulation keeps the summation order fixed (no pairwise sums)
    total = np.zeros(vol.shape[:ax] + vol.shape[ax + 1:])
    for k in range(vol.shape[ax]):
        total += np.take(vol, k, axis=ax)
    return total


def aip(vol, mask=None, axis="coronal"):
    """Average intensity projection, optionally restricted to ``mask`` (empty columns give 0)."""
    vol = np.asarray(vol, dtype=np.float64)
    ax = _axis(axis)
    if vol.ndim != 3 or vol.shape[ax] == 0:
        raise InvalidInputError(f"cannot project volume of shape {vol.shape} along {axis}")
    if mask is None:
        return _ordered_sum(vol, ax) / vol.shape[ax]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.shape:
        raise InvalidInputError("mask and volume shapes differ")
    count = mask.sum(axis=ax)
    total = _ordered_sum(np.where(mask, vol, 0.0), ax)
    out = np.zeros_like(total)
    np.divide(total, count, out=out, where=count > 0)
    return out


def fit_canvas(img, target=CANVAS):
    """Center-crop or symmetrically zero-pad a 2D image to ``target``.

    An odd surplus is split with the extra row/column going to the bottom/right.
    """
    img = np.asarray(img)
    out = img
    for dim, size in enumerate(target):
        cur = out.shape[dim]
        if cur > size:
            start = (cur - size) // 2
            out = out[(slice(None),) * dim + (slice(start, start + size),)]
        elif cur < size:
            before = (size - cur) // 2
            pad = [(0, 0), (0, 0)]
            pad[dim] = (before, size - cur - before)
            out = np.pad(out, pad)
    return np.ascontiguousarray(out)


def _side_by_side(fn):
    return np.concatenate([fit_canvas(fn("coronal")), fit_canvas(fn("sagittal"))], axis=1)


def build_collage(vs: VolumeSet) -> ProjectionCollage:
    vs.validate()
    hu = np.asarray(vs.hu, dtype=np.float64)
    suv = np.asarray(vs.suv, dtype=np.float64)
    tumor = np.asarray(vs.tumor_mask, dtype=bool)
    tissues = tissue_partition(hu).as_tuple()

    channels = [_side_by_side(lambda ax: mip(suv, ax))]
    channels += [_side_by_side(lambda ax, m=m: mip(suv, ax, mask=m)) for m in tissues]
    channels.append(_side_by_side(lambda ax: aip(hu, axis=ax)))
    channels += [_side_by_side(lambda ax, m=m: aip(hu, mask=m, axis=ax)) for m in tissues]
    channels.append(_side_by_side(lambda ax: mip(suv, ax, mask=tumor)))
    channels.append(_side_by_side(lambda ax: aip(suv, mask=tumor, axis=ax)))
    stack = np.stack(channels)
    assert stack.shape == COLLAGE_SHAPE, stack.shape
    return ProjectionCollage(stack)


def projected_tumor_mask(tumor_mask) -> np.ndarray:
    """Boolean 400x512 image marking pixels whose projection column hits the tumor."""
    tumor = np.asarray(tumor_mask, dtype=bool)
    return _side_by_side(lambda ax: tumor.any(axis=_axis(ax))).astype(bool)
