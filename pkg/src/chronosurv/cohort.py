"""Synthetic patient cohorts, survival bookkeeping, tabular features and folds.

Each synthetic patient gets three independent random streams derived from
``(seed, patient_index, purpose)``, so patients can be rendered in any order
(or in parallel) and a volume can be re-rendered on demand instead of being
held in memory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import CohortConfig
from .errors import InvalidConfigError, InvalidInputError, StratificationError
from .projection import VolumeSet
from . import storage

T_STAGES = ("T1", "T2", "T3", "T4")
N_STAGES = ("N0", "N1", "N2", "N3")
FEATURE_NAMES = (
    ("age", "sex", "tmtv", "dmax_gt_q3", "lesions_gt_median")
    + T_STAGES + ("T_missing",) + N_STAGES + ("N_missing",)
)
MANIFEST_FIELDS = (
    "id", "scan_day", "death_day", "lfd_day", "event", "age", "sex",
    "t_stage", "n_stage", "tmtv", "dmax", "lesion_count",
)

_STREAM_GEOMETRY, _STREAM_CLINICAL, _STREAM_SURVIVAL = 0, 1, 2


@dataclass(frozen=True)
class PatientRecord:
    id: str
    scan_day: int
    death_day: Optional[int]
    lfd_day: int
    event: bool
    age: float
    sex: str
    t_stage: Optional[str]
    n_stage: Optional[str]
    tmtv: float
    dmax: float
    lesion_count: int

    def __post_init__(self):
        if self.scan_day > self.lfd_day:
            raise InvalidInputError(f"{self.id}: scan_day after lfd_day")
        if self.event:
            if self.death_day is None or not self.scan_day <= self.death_day <= self.lfd_day:
                raise InvalidInputError(f"{self.id}: death_day must lie in [scan_day, lfd_day]")
        elif self.death_day is not None:
            raise InvalidInputError(f"{self.id}: censored patient cannot carry a death_day")
        if self.tmtv < 0 or self.dmax < 0 or self.lesion_count < 0:
            raise InvalidInputError(f"{self.id}: tumor burden fields must be non-negative")

    @property
    def time(self) -> int:
        """Observed survival time in days from the scan (death or last follow-up)."""
        end = self.death_day if self.event else self.lfd_day
        return end - self.scan_day

    @property
    def follow_up(self) -> int:
        return self.lfd_day - self.scan_day


@dataclass
class VolumeRef:
    """Lazy handle on a patient's volumes: either re-rendered or read from disk."""

    loader: Callable[[], VolumeSet]
    path: Optional[str] = None

    def load(self) -> VolumeSet:
        return self.loader()


@dataclass
class CohortDataset:
    patients: list
    volumes: dict
    ground_truth_hazard: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("patient ids must be unique")
        if set(ids) != set(self.volumes):
            raise InvalidInputError("every patient needs exactly one volume reference")

    def by_id(self) -> dict:
        return {p.id: p for p in self.patients}

    def subset(self, ids) -> "CohortDataset":
        keep = set(ids)
        return CohortDataset(
            [p for p in self.patients if p.id in keep],
            {k: v for k, v in self.volumes.items() if k in keep},
            {k: v for k, v in self.ground_truth_hazard.items() if k in keep},
        )


# ---------------------------------------------------------------- generation

@lru_cache(maxsize=8)
def _anatomy(dims):
    """Static body layout for a given grid: HU and SUV templates plus a body mask."""
    nx, ny, nz = dims
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, nz), np.linspace(-1, 1, ny), np.linspace(-1, 1, nx), indexing="ij"
    )
    body_r = (x / 0.85) ** 2 + (y / 0.8) ** 2
    body = body_r <= 1.0
    inner = body_r <= 0.72
    hu = np.full(x.shape, -1000.0)
    suv = np.zeros(x.shape)
    hu[body], suv[body] = -100.0, 0.3  # subcutaneous fat
    hu[inner], suv[inner] = 40.0, 1.0  # lean soft tissue
    lungs = ((np.abs(x) - 0.38) / 0.28) ** 2 + (y / 0.45) ** 2 + ((z + 0.25) / 0.5) ** 2 <= 1.0
    hu[lungs & inner], suv[lungs & inner] = -800.0, 0.4
    spine = (x / 0.12) ** 2 + ((y - 0.5) / 0.14) ** 2 <= 1.0
    hu[spine], suv[spine] = 450.0, 1.4
    lesion_space = ((x / 0.55) ** 2 + (y / 0.5) ** 2 <= 1.0) & (np.abs(z) <= 0.7)
    return hu, suv, body, lesion_space


def _lesions(cfg: CohortConfig, rng):
    """Draw lesion centres (voxel coords, z/y/x) and radii (mm)."""
    nx, ny, nz = cfg.dims
    _, _, _, space = _anatomy(tuple(cfg.dims))
    high = rng.random() < cfg.high_burden_fraction
    burden = rng.uniform(0.85, 1.0) if high else rng.uniform(0.01, 0.06)
    r_max_mm = 0.45 * min(nx * cfg.spacing_mm[0], ny * cfg.spacing_mm[1])
    primary = r_max_mm * burden ** (1.0 / 3.0)
    n_sat = min(int(rng.poisson(cfg.lesion_rate)), cfg.max_lesions - 1)
    radii = [primary] + list(primary * rng.uniform(0.2, 0.35, size=n_sat))
    candidates = np.argwhere(space)
    centres = candidates[rng.integers(0, len(candidates), size=len(radii))]
    return centres.astype(float), np.asarray(radii)


def render_patient(cfg: CohortConfig, seed: int, index: int):
    """Render one synthetic patient; returns ``(VolumeSet, centres_vox, radii_mm)``."""
    dims = tuple(cfg.dims)
    rng = np.random.default_rng([seed, index, _STREAM_GEOMETRY])
    centres, radii = _lesions(cfg, rng)
    hu_t, suv_t, body, _ = _anatomy(dims)
    sx, sy, sz = cfg.spacing_mm
    nz, ny, nx = body.shape
    zz, yy, xx = np.ogrid[:nz, :ny, :nx]
    mask = np.zeros(body.shape, dtype=bool)
    uptake = np.zeros(body.shape)
    for (cz, cy, cx), r in zip(centres, radii):
        d2 = ((zz - cz) * sz / r) ** 2 + ((yy - cy) * sy / r) ** 2 + ((xx - cx) * sx / r) ** 2
        inside = (d2 <= 1.0) & body
        peak = rng.uniform(4.0, 10.0)
        uptake = np.where(inside, np.maximum(uptake, peak * (1.0 - 0.4 * d2)), uptake)
        mask |= inside
    hu = hu_t + rng.normal(0.0, 6.0, size=body.shape)
    hu[mask] = 35.0 + rng.normal(0.0, 6.0, size=int(mask.sum()))
    suv = np.clip(suv_t + rng.normal(0.0, 0.05, size=body.shape) * body, 0.0, None)
    suv[mask] = uptake[mask]
    vs = VolumeSet(hu.astype(np.float32), suv.astype(np.float32), mask.astype(np.uint8), tuple(cfg.spacing_mm))
    return vs, centres, radii


def _stage_from_diameter(diam_mm):
    for stage, limit in zip(T_STAGES, (12.0, 20.0, 28.0)):
        if diam_mm < limit:
            return stage
    return "T4"


def generate_cohort(config: CohortConfig, seed: int) -> CohortDataset:
    """Build a synthetic cohort with exponential event times linked to TMTV.

    The per-day hazard of patient ``i`` is
    ``base_rate * exp(beta * tmtv_i / max(tmtv) + beta_age * (age_i - 68) / 9)``.
    Follow-up is uniform on ``[censor_min_days, censor_max_days]`` after the scan.
    """
    if config.n < 4:
        raise InvalidConfigError(f"cohort.n must be >= 4 (got {config.n})", "cohort.n")
    if len(config.dims) != 3 or min(config.dims) < 4:
        raise InvalidConfigError(f"cohort.dims must be three sizes >= 4, got {config.dims}", "cohort.dims")
    if not 0 < config.censor_min_days <= config.censor_max_days:
        raise InvalidConfigError("censoring window must satisfy 0 < min <= max", "cohort.censor_min_days")
    voxel_ml = float(np.prod(config.spacing_mm)) / 1000.0

    burden = []
    for i in range(config.n):
        vs, centres, radii = render_patient(config, seed, i)
        tmtv = float(vs.tumor_mask.sum()) * voxel_ml
        pts = centres * np.array([config.spacing_mm[2], config.spacing_mm[1], config.spacing_mm[0]])
        dmax = 0.0
        if len(pts) > 1:
            dmax = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1)))
        burden.append((round(tmtv, 4), round(dmax, 3), len(radii), 2.0 * radii[0]))
    tmtv_max = max(b[0] for b in burden) or 1.0

    patients, volumes, hazard = [], {}, {}
    for i, (tmtv, dmax, count, diam) in enumerate(burden):
        pid = f"P{i:04d}"
        rc = np.random.default_rng([seed, i, _STREAM_CLINICAL])
        age = round(float(np.clip(rc.normal(68.0, 9.0), 35.0, 90.0)), 1)
        sex = "female" if rc.random() < 0.5 else "male"
        t_stage = None if rc.random() < config.t_missing else _stage_from_diameter(diam)
        n_idx = min(3, max(0, count - 1 + int(rc.integers(-1, 2))))
        n_stage = None if rc.random() < config.n_missing else N_STAGES[n_idx]

        rate = config.base_rate * math.exp(
            config.beta * tmtv / tmtv_max + config.beta_age * (age - 68.0) / 9.0
        )
        rs = np.random.default_rng([seed, i, _STREAM_SURVIVAL])
        scan = int(rs.integers(0, config.scan_window_days + 1))
        death_offset = max(1, int(math.ceil(rs.exponential(1.0 / rate))))
        follow = int(rs.integers(config.censor_min_days, config.censor_max_days + 1))
        event = death_offset <= follow
        patients.append(PatientRecord(
            id=pid, scan_day=scan, death_day=scan + death_offset if event else None,
            lfd_day=scan + follow, event=bool(event), age=age, sex=sex, t_stage=t_stage,
            n_stage=n_stage, tmtv=tmtv, dmax=dmax, lesion_count=count,
        ))
        volumes[pid] = VolumeRef(lambda i=i: render_patient(config, seed, i)[0])
        hazard[pid] = rate
    return CohortDataset(patients, volumes, hazard)


# ------------------------------------------------------------------ manifest

def patient_to_dict(p: PatientRecord) -> dict:
    return {name: getattr(p, name) for name in MANIFEST_FIELDS}


def manifest_bytes(patients) -> bytes:
    return (json.dumps([patient_to_dict(p) for p in patients], indent=1) + "\n").encode()


def manifest_hash(patients) -> str:
    return hashlib.sha256(manifest_bytes(patients)).hexdigest()


def read_manifest(path) -> list:
    rows = json.loads(Path(path).read_text())
    patients = []
    for row in rows:
        missing = set(MANIFEST_FIELDS) - set(row)
        extra = set(row) - set(MANIFEST_FIELDS)
        if missing or extra:
            raise InvalidInputError(f"manifest row {row.get('id')}: missing {sorted(missing)}, extra {sorted(extra)}")
        patients.append(PatientRecord(**row))
    return patients


def save_cohort(cohort: CohortDataset, out_dir) -> Path:
    """Write ``manifest.json``, ``truth.json`` and ``volumes/<id>_{hu,suv,mask}.f32``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in cohort.patients:
        storage.write_volume_set(out, p.id, cohort.volumes[p.id].load())
    (out / "manifest.json").write_bytes(manifest_bytes(cohort.patients))
    if cohort.ground_truth_hazard:
        (out / "truth.json").write_text(json.dumps(cohort.ground_truth_hazard, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_cohort(data_dir) -> CohortDataset:
    root = Path(data_dir)
    patients = read_manifest(root / "manifest.json")
    volumes = {
        p.id: VolumeRef(lambda pid=p.id: storage.read_volume_set(root, pid),
                        str(storage.volume_paths(root, p.id)["hu"].relative_to(root)))
        for p in patients
    }
    truth = {}
    if (root / "truth.json").exists():
        truth = json.loads((root / "truth.json").read_text())
    return CohortDataset(patients, volumes, truth)


# --------------------------------------------------------------------- folds

@dataclass
class FoldAssignment:
    fold_of: dict
    k: int

    def members(self, fold: int) -> list:
        return [pid for pid, f in self.fold_of.items() if f == fold]

    def complement(self, fold: int) -> list:
        return [pid for pid, f in self.fold_of.items() if f != fold]


def split_folds(cohort, k: int, seed: int) -> FoldAssignment:
    """Patient-level folds stratified by event status.

    Events and censored patients are shuffled separately and dealt round-robin;
    the censored deal continues where the event deal stopped so fold sizes
    differ by at most one.
    """
    patients = cohort.patients if isinstance(cohort, CohortDataset) else list(cohort)
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    events = [p.id for p in patients if p.event]
    censored = [p.id for p in patients if not p.event]
    if len(events) < k or len(censored) < k:
        raise StratificationError(
            f"need >= {k} events and >= {k} censored patients, have {len(events)} and {len(censored)}"
        )
    rng = np.random.default_rng([seed, 7919])
    fold_of = {}
    offset = 0
    for group in (events, censored):
        for j, idx in enumerate(rng.permutation(len(group))):
            fold_of[group[idx]] = (offset + j) % k
        offset += len(group)
    order = {p.id: i for i, p in enumerate(patients)}
    return FoldAssignment(dict(sorted(fold_of.items(), key=lambda kv: order[kv[0]])), k)


# ---------------------------------------------------------------- tabular

@dataclass(frozen=True)
class CohortStats:
    age_mean: float
    age_std: float
    tmtv_mean: float
    tmtv_std: float
    dmax_q3: float
    lesion_median: float


@dataclass
class FeatureVector:
    values: np.ndarray
    names: tuple = FEATURE_NAMES


def _safe_std(values):
    sd = float(np.std(values))
    return 1.0 if sd < 1e-9 else sd


def compute_cohort_stats(patients) -> CohortStats:
    """Statistics for featurization; pass training-fold patients only."""
    age = np.array([p.age for p in patients], dtype=float)
    tmtv = np.array([p.tmtv for p in patients], dtype=float)
    return CohortStats(
        age_mean=float(age.mean()), age_std=_safe_std(age),
        tmtv_mean=float(tmtv.mean()), tmtv_std=_safe_std(tmtv),
        dmax_q3=float(np.percentile([p.dmax for p in patients], 75)),
        lesion_median=float(np.median([p.lesion_count for p in patients])),
    )


def featurize_tabular(patient: PatientRecord, cohort_stats: CohortStats) -> FeatureVector:
    s = cohort_stats
    t_hot = [1.0 if patient.t_stage == t else 0.0 for t in T_STAGES]
    n_hot = [1.0 if patient.n_stage == n else 0.0 for n in N_STAGES]
    values = [
        (patient.age - s.age_mean) / s.age_std,
        1.0 if patient.sex == "male" else 0.0,
        (patient.tmtv - s.tmtv_mean) / s.tmtv_std,
        1.0 if patient.dmax > s.dmax_q3 else 0.0,
        1.0 if patient.lesion_count > s.lesion_median else 0.0,
        *t_hot, 1.0 if patient.t_stage is None else 0.0,
        *n_hot, 1.0 if patient.n_stage is None else 0.0,
    ]
    return FeatureVector(np.asarray(values, dtype=np.float64))


def feature_matrix(patients, stats: CohortStats) -> np.ndarray:
    return np.stack([featurize_tabular(p, stats).values for p in patients])


def survival_arrays(patients):
    """``(times, events)`` arrays measured in days from each patient's scan."""
    times = np.array([p.time for p in patients], dtype=float)
    events = np.array([p.event for p in patients], dtype=bool)
    return times, events


def replace_patient(p: PatientRecord, **changes) -> PatientRecord:
    return dataclasses.replace(p, **changes)
