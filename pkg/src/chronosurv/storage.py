"""On-disk formats: raw float32 volumes with JSON sidecars and the collage cache.

Binary payloads are little-endian float32 with x varying fastest, i.e. a numpy
array indexed ``(z, y, x)`` written in C order.  The sidecar sits next to the
payload with a ``.json`` suffix and records ``dims`` as ``[nx, ny, nz]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .projection import CHANNEL_ORDER, COLLAGE_SHAPE, ProjectionCollage, VolumeSet

VOLUME_KINDS = ("hu", "suv", "mask")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_array(path, array, kind, spacing_mm=None, extra=None):
    path = Path(path)
    array = np.asarray(array)
    meta = {"dims": list(reversed(array.shape)), "kind": kind}
    if spacing_mm is not None:
        meta["spacing_mm"] = [float(s) for s in spacing_mm]
    if extra:
        meta.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")
    path.write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_array(path):
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    shape = tuple(reversed(meta["dims"]))
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise InvalidInputError(f"{path}: expected {np.prod(shape)} floats, found {data.size}")
    return data.reshape(shape).astype(np.float32), meta


def volume_paths(root, patient_id) -> dict:
    root = Path(root)
    return {kind: root / "volumes" / f"{patient_id}_{kind}.f32" for kind in VOLUME_KINDS}


def write_volume_set(root, patient_id, vs: VolumeSet) -> dict:
    paths = volume_paths(root, patient_id)
    write_array(paths["hu"], vs.hu, "hu", vs.spacing_mm)
    write_array(paths["suv"], vs.suv, "suv", vs.spacing_mm)
    write_array(paths["mask"], vs.tumor_mask, "mask", vs.spacing_mm)
    return paths


def read_volume_set(root, patient_id) -> VolumeSet:
    paths = volume_paths(root, patient_id)
    hu, meta = read_array(paths["hu"])
    suv, _ = read_array(paths["suv"])
    mask, _ = read_array(paths["mask"])
    return VolumeSet(hu, suv, mask.astype(np.uint8), tuple(meta.get("spacing_mm", (2.04, 2.04, 3.0))))


def collage_path(root, patient_id) -> Path:
    return Path(root) / "collages" / f"{patient_id}_collage.f32"


def write_collage(root, patient_id, collage: ProjectionCollage) -> Path:
    path = collage_path(root, patient_id)
    write_array(path, collage.channels, "collage", extra={"channel_order": list(collage.channel_order)})
    return path


def read_collage(root, patient_id) -> ProjectionCollage:
    data, meta = read_array(collage_path(root, patient_id))
    if data.shape != COLLAGE_SHAPE:
        raise InvalidInputError(f"collage has shape {data.shape}, expected {COLLAGE_SHAPE}")
    return ProjectionCollage(data.astype(np.float64), tuple(meta.get("channel_order", CHANNEL_ORDER)))
