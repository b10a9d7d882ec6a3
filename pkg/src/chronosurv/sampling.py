"""Phase-based time sampling for training and the fixed evaluation grid.

Times are integer days after the scan.  For an alive patient, samples come
from ``(0, lfd - scan]``.  A deceased patient's window splits into the alive
phase ``(0, death - scan)`` and the deceased phase ``[death - scan, lfd - scan]``;
a deceased phase of zero length collapses to the single day of death.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SamplingConfig
from .errors import InvalidInputError

ALIVE, DECEASED = "alive", "deceased"


@dataclass(frozen=True)
class TimeSample:
    patient_id: str
    t_days: int
    t_norm: float
    label: str

    @property
    def y(self) -> int:
        """1 for alive, 0 for deceased (the network predicts P(alive))."""
        return 1 if self.label == ALIVE else 0


def normalize_time(t_days, horizon_days=1825) -> float:
    if t_days < 0:
        raise InvalidInputError(f"time must be non-negative, got {t_days}")
    return min(float(t_days), float(horizon_days)) / float(horizon_days)


def evaluation_grid(horizon_days=1825, step=30) -> np.ndarray:
    if step < 1:
        raise InvalidInputError(f"grid step must be >= 1, got {step}")
    grid = np.arange(0, horizon_days + 1, step)
    if grid[-1] != horizon_days:
        grid = np.append(grid, horizon_days)
    return grid


def _draw(rng, lo, hi, count):
    """``count`` uniform integer days in ``[lo, hi]``; an empty range gives none."""
    if hi < lo or count <= 0:
        return []
    if hi == lo:
        return [lo]
    return [int(v) for v in rng.integers(lo, hi + 1, size=count)]


def sample_epoch(patient, rng, cfg: SamplingConfig | None = None) -> list:
    cfg = cfg or SamplingConfig()
    follow = patient.lfd_day - patient.scan_day
    if follow <= 0:
        raise InvalidInputError(f"{patient.id}: last follow-up must be after the scan")

    def make(days, label):
        return [TimeSample(patient.id, d, normalize_time(d, cfg.horizon_days), label) for d in days]

    if not patient.event:
        return make(_draw(rng, 1, follow, cfg.alive_points), ALIVE)
    death = patient.death_day - patient.scan_day
    samples = make(_draw(rng, 1, death - 1, cfg.alive_points), ALIVE)
    samples += make(_draw(rng, death, follow, cfg.deceased_points), DECEASED)
    return samples


def check_label(sample: TimeSample, patient) -> bool:
    """True iff ``sample`` respects the observation window and labelling rule."""
    day = patient.scan_day + sample.t_days
    if not patient.scan_day <= day <= patient.lfd_day:
        return False
    dead = patient.event and day >= patient.death_day
    return (sample.label == DECEASED) == dead
