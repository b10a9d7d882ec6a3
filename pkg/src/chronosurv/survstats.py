"""Kaplan-Meier, log-rank, concordance, time-dependent AUC and AUSPC.

Times are days from the scan.  Metrics that have no defined value for the
given data (no comparable pairs, no cases or no controls) raise
:class:`UndefinedMetricError` rather than returning 0.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

HORIZON_DAYS = 1825
HORIZONS_YEARS = tuple(0.5 * k for k in range(1, 11))


def years_to_days(years: float) -> float:
    return 365.0 * years


# --------------------------------------------------------------- Kaplan-Meier

@dataclass
class KMCurve:
    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    censor_marks: np.ndarray

    def __call__(self, t):
        """Step-function value S(t); S = 1 before the first event."""
        idx = np.searchsorted(self.event_times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[idx]


def km_fit(times, events) -> KMCurve:
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events).astype(bool)
    if t.size == 0 or t.shape != d.shape:
        raise InvalidInputError("km_fit needs equal-length, non-empty times and events")
    if np.any(t < 0):
        raise InvalidInputError("survival times must be non-negative")
    uniq = np.unique(t[d])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=int)
    deaths = np.array([((t == u) & d).sum() for u in uniq], dtype=int)
    surv = np.cumprod(1.0 - deaths / at_risk) if uniq.size else np.array([])
    return KMCurve(uniq, surv, at_risk, np.sort(t[~d]))


# ------------------------------------------------------------------- log-rank

class LogRankResult(NamedTuple):
    chi2: float
    p: float
    observed_a: float = 0.0
    expected_a: float = 0.0
    variance: float = 0.0


def chi2_sf_1df(chi2: float) -> float:
    """Upper tail of the 1-df chi-square distribution, ``erfc(sqrt(chi2 / 2))``."""
    return math.erfc(math.sqrt(max(chi2, 0.0) / 2.0))


def log_rank(group_a, group_b) -> LogRankResult:
    ta, ea = (np.asarray(v) for v in group_a)
    tb, eb = (np.asarray(v) for v in group_b)
    ea, eb = ea.astype(bool), eb.astype(bool)
    if ta.size == 0 or tb.size == 0:
        raise InvalidInputError("both log-rank groups must be non-empty")
    if not (ea.any() or eb.any()):
        raise UndefinedMetricError("log-rank statistic undefined without events")
    t_all = np.concatenate([ta, tb])
    e_all = np.concatenate([ea, eb])
    obs = exp = var = 0.0
    for u in np.unique(t_all[e_all]):
        n_a = float((ta >= u).sum())
        n = float((t_all >= u).sum())
        d_a = float(((ta == u) & ea).sum())
        d = float(((t_all == u) & e_all).sum())
        obs += d_a
        exp += d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0)
    chi2 = (obs - exp) ** 2 / var if var > 0 else 0.0
    return LogRankResult(float(chi2), chi2_sf_1df(chi2), obs, exp, var)


# ---------------------------------------------------------------- C-index

def c_index(risk, times, events) -> float:
    """Harrell's concordance; pairs with tied times are not comparable."""
    r = np.asarray(risk, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events).astype(bool)
    if not (r.shape == t.shape == d.shape):
        raise InvalidInputError("risk, times and events must have equal length")
    comparable = d[:, None] & (t[:, None] < t[None, :])
    n = comparable.sum()
    if n == 0:
        raise UndefinedMetricError("no comparable pairs for the C-index")
    diff = r[:, None] - r[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n)


# ------------------------------------------------------- horizon metrics

def horizon_status(patient, tau_days) -> Optional[bool]:
    """True if dead by ``tau``, False if known alive past ``tau``, None if censored before."""
    if patient.event and patient.death_day - patient.scan_day <= tau_days:
        return True
    if patient.lfd_day - patient.scan_day > tau_days:
        return False
    return None


def _cases_controls(probs_at_tau, patients, tau):
    if tau <= 0:
        raise InvalidInputError("horizon must be positive")
    probs = np.asarray(probs_at_tau, dtype=np.float64)
    status = [horizon_status(p, tau) for p in patients]
    cases = probs[[s is True for s in status]]
    controls = probs[[s is False for s in status]]
    return cases, controls


def time_dependent_auc(probs_at_tau, patients, tau) -> float:
    """Cumulative-case / dynamic-control AUC at ``tau`` with P(alive) as the score.

    Patients censored before ``tau`` are dropped (no IPCW weighting).
    """
    cases, controls = _cases_controls(probs_at_tau, patients, tau)
    if cases.size == 0 or controls.size == 0:
        raise UndefinedMetricError(f"AUC at {tau} days needs cases and controls "
                                   f"(have {cases.size} and {controls.size})")
    diff = controls[None, :] - cases[:, None]  # case ranked riskier when its P(alive) is lower
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score.mean())


def accuracy_at(probs_at_tau, patients, tau, threshold=0.5) -> float:
    cases, controls = _cases_controls(probs_at_tau, patients, tau)
    n = cases.size + controls.size
    if n == 0:
        raise UndefinedMetricError(f"no eligible patients at {tau} days")
    correct = (cases < threshold).sum() + (controls >= threshold).sum()
    return float(correct / n)


def eligible_counts(patients, tau):
    status = [horizon_status(p, tau) for p in patients]
    return sum(s is True for s in status), sum(s is False for s in status)


# ------------------------------------------------------------------ curves

def auspc(curve, horizon_days=HORIZON_DAYS) -> float:
    """Trapezoidal area under a survival curve over ``[0, horizon]``, in days."""
    grid = np.asarray(curve.grid_days, dtype=np.float64)
    probs = np.asarray(curve.probs, dtype=np.float64)
    if grid.size < 2 or grid[0] != 0 or grid[-1] < horizon_days:
        raise InvalidInputError(f"grid must start at 0 and reach {horizon_days} days")
    if grid[-1] > horizon_days:
        keep = grid < horizon_days
        probs = np.append(probs[keep], np.interp(horizon_days, grid, probs))
        grid = np.append(grid[keep], horizon_days)
    return float(np.sum((probs[1:] + probs[:-1]) * 0.5 * np.diff(grid)))


def predicted_death_time(curve, level=0.5) -> Optional[float]:
    """First time the curve drops below ``level``, linearly interpolated; None if it never does."""
    grid = np.asarray(curve.grid_days, dtype=np.float64)
    probs = np.asarray(curve.probs, dtype=np.float64)
    below = np.flatnonzero(probs < level)
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 0:
        return float(grid[0])
    p0, p1 = probs[k - 1], probs[k]
    return float(grid[k - 1] + (p0 - level) / (p0 - p1) * (grid[k] - grid[k - 1]))


def prob_at(curve, tau) -> float:
    return float(np.interp(tau, curve.grid_days, curve.probs))


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    auc_by_horizon: dict
    accuracy_by_horizon: dict
    counts_by_horizon: dict
    mean_auc: Optional[float]
    mean_accuracy: Optional[float]
    c_index: Optional[float]
    auspc_per_patient: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("years,auc,accuracy,n_cases,n_controls\n")
        for years in sorted(self.auc_by_horizon):
            n_case, n_ctrl = self.counts_by_horizon[years]
            buf.write(f"{_num(years)},{_num(self.auc_by_horizon[years])},"
                      f"{_num(self.accuracy_by_horizon[years])},{n_case},{n_ctrl}\n")
        buf.write(f"Mean,{_num(self.mean_auc)},{_num(self.mean_accuracy)},,\n")
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "horizons": [
                {"years": y, "auc": _round(self.auc_by_horizon[y]),
                 "accuracy": _round(self.accuracy_by_horizon[y]),
                 "n_cases": self.counts_by_horizon[y][0], "n_controls": self.counts_by_horizon[y][1]}
                for y in sorted(self.auc_by_horizon)
            ],
            "mean_auc": _round(self.mean_auc),
            "mean_accuracy": _round(self.mean_accuracy),
            "c_index": _round(self.c_index),
            "auspc_per_patient": {k: _round(v) for k, v in sorted(self.auspc_per_patient.items())},
        }
        return json.dumps(payload, indent=1) + "\n"


def _num(value) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def _round(value):
    return None if value is None else float(f"{value:.6g}")


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate_curves(curves: dict, patients, horizons_years=HORIZONS_YEARS,
                    horizon_days=HORIZON_DAYS) -> EvalReport:
    """Full evaluation of monotonized per-patient curves against observed outcomes."""
    patients = list(patients)
    auc, acc, counts = {}, {}, {}
    for years in horizons_years:
        tau = years_to_days(years)
        probs = [prob_at(curves[p.id], tau) for p in patients]
        auc[years] = _maybe(time_dependent_auc, probs, patients, tau)
        acc[years] = _maybe(accuracy_at, probs, patients, tau)
        counts[years] = eligible_counts(patients, tau)
    defined = [v for v in auc.values() if v is not None]
    defined_acc = [v for v in acc.values() if v is not None]
    areas = {p.id: auspc(curves[p.id], horizon_days) for p in patients}
    risk = [1.0 - areas[p.id] / horizon_days for p in patients]
    times = [p.time for p in patients]
    events = [p.event for p in patients]
    return EvalReport(
        auc_by_horizon=auc,
        accuracy_by_horizon=acc,
        counts_by_horizon=counts,
        mean_auc=float(np.mean(defined)) if defined else None,
        mean_accuracy=float(np.mean(defined_acc)) if defined_acc else None,
        c_index=_maybe(c_index, risk, times, events),
        auspc_per_patient=areas,
    )


def horizon_report(probs_by_horizon: dict, patients) -> EvalReport:
    """Evaluation for models that emit one probability per horizon (no curves)."""
    patients = list(patients)
    auc, acc, counts = {}, {}, {}
    for years, probs in sorted(probs_by_horizon.items()):
        tau = years_to_days(years)
        counts[years] = eligible_counts(patients, tau)
        if probs is None:
            auc[years] = acc[years] = None
            continue
        auc[years] = _maybe(time_dependent_auc, probs, patients, tau)
        acc[years] = _maybe(accuracy_at, probs, patients, tau)
    defined = [v for v in auc.values() if v is not None]
    defined_acc = [v for v in acc.values() if v is not None]
    return EvalReport(auc, acc, counts,
                      float(np.mean(defined)) if defined else None,
                      float(np.mean(defined_acc)) if defined_acc else None, None)
