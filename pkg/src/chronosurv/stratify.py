"""Risk groups from predicted survival area, and per-subgroup log-rank tests."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClusterError, InvalidInputError, StratificationError, UndefinedMetricError
from .survstats import LogRankResult, auspc, log_rank

log = logging.getLogger(__name__)

HIGH, LOW = "high", "low"
MIN_SUBGROUP = 4


def kmeans_1d(values, k=2, seed=None):
    """Globally optimal 1-D k-means (least within-cluster squared error).

    Solved exactly by dynamic programming over the sorted distinct values, so
    equal values always share a cluster and no initialization is involved;
    ``seed`` is accepted for interface symmetry and ignored.  Returns
    ``(labels, centroids)`` with clusters numbered in increasing centroid order.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("kmeans_1d needs a non-empty 1-D array")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("kmeans_1d values must be finite")
    if k < 1:
        raise InvalidInputError(f"k must be positive, got {k}")
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    m = uniq.size
    if m < k:
        raise DegenerateClusterError(f"{m} distinct values cannot form {k} clusters")

    w = counts.astype(np.float64)
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cs = np.concatenate([[0.0], np.cumsum(w * uniq)])
    cq = np.concatenate([[0.0], np.cumsum(w * uniq * uniq)])

    def sse(lo, hi):  # cost of distinct values lo..hi-1 (arrays allowed)
        n = cw[hi] - cw[lo]
        s = cs[hi] - cs[lo]
        return np.maximum(cq[hi] - cq[lo] - s * s / n, 0.0)

    cost = np.full((k + 1, m + 1), np.inf)
    arg = np.zeros((k + 1, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for c in range(1, k + 1):
        for hi in range(c, m + 1):
            lo = np.arange(c - 1, hi)
            cand = cost[c - 1, lo] + sse(lo, hi)
            j = int(np.argmin(cand))
            cost[c, hi], arg[c, hi] = cand[j], lo[j]
    bounds = [m]
    for c in range(k, 0, -1):
        bounds.append(int(arg[c, bounds[-1]]))
    bounds = bounds[::-1]  # 0 = b0 < b1 < ... < bk = m

    label_of_uniq = np.empty(m, dtype=np.int64)
    centroids = np.empty(k)
    for c in range(k):
        lo, hi = bounds[c], bounds[c + 1]
        label_of_uniq[lo:hi] = c
        centroids[c] = (cs[hi] - cs[lo]) / (cw[hi] - cw[lo])
    return label_of_uniq[inverse], centroids


@dataclass
class RiskAssignment:
    group_of: dict
    centroids: dict  # group -> centroid in days
    values: dict = field(default_factory=dict)

    def members(self, group):
        return [pid for pid, g in self.group_of.items() if g == group]


def assign_risk(auspc_by_id: dict) -> RiskAssignment:
    """Two-cluster split of AUSPC values; the lower-area cluster is high risk."""
    ids = list(auspc_by_id)
    values = np.array([auspc_by_id[i] for i in ids], dtype=np.float64)
    labels, centroids = kmeans_1d(values, 2)
    group_of = {pid: (HIGH if lab == 0 else LOW) for pid, lab in zip(ids, labels)}
    return RiskAssignment(group_of, {HIGH: float(centroids[0]), LOW: float(centroids[1])},
                          dict(auspc_by_id))


def _as_area(value):
    return auspc(value) if hasattr(value, "grid_days") else float(value)


def risk_logrank(assignment: RiskAssignment, patients) -> LogRankResult:
    by_id = {p.id: p for p in patients}
    groups = []
    for g in (HIGH, LOW):
        members = [by_id[i] for i in assignment.members(g)]
        groups.append(([p.time for p in members], [p.event for p in members]))
    return log_rank(groups[0], groups[1])


@dataclass
class SubgroupResult:
    category: str
    value: object
    n: int
    assignment: RiskAssignment | None
    logrank: LogRankResult | None
    note: str = ""


def subgroup_stratify(patients, curves_or_areas: dict, by="t_stage") -> list:
    """Split each subgroup (e.g. per T stage) into risk groups and test them.

    Subgroups with fewer than four patients or a single distinct AUSPC value are
    skipped with a notice instead of failing the whole run.
    """
    patients = list(patients)
    if not patients:
        raise StratificationError("no patients to stratify")
    if not hasattr(patients[0], by):
        raise StratificationError(f"unknown subgroup attribute {by!r}")
    results = []
    for value in sorted({getattr(p, by) for p in patients}, key=lambda v: (v is None, str(v))):
        members = [p for p in patients if getattr(p, by) == value]
        label = "missing" if value is None else value
        areas = {p.id: _as_area(curves_or_areas[p.id]) for p in members}
        note = ""
        if len(members) < MIN_SUBGROUP:
            note = f"skipped: {len(members)} patients (< {MIN_SUBGROUP})"
        elif len(set(areas.values())) < 2:
            note = "skipped: single distinct AUSPC value"
        if note:
            log.warning("subgroup %s=%s %s", by, label, note)
            results.append(SubgroupResult(by, label, len(members), None, None, note))
            continue
        assignment = assign_risk(areas)
        try:
            test = risk_logrank(assignment, members)
        except UndefinedMetricError as exc:
            note = f"log-rank undefined: {exc}"
            log.warning("subgroup %s=%s %s", by, label, note)
            test = None
        results.append(SubgroupResult(by, label, len(members), assignment, test, note))
    return results


def stratification_csv(results) -> str:
    """One row per stratified patient: category, value, id, AUSPC in days, risk group."""
    buf = io.StringIO()
    buf.write("category,value,id,auspc_days,group\n")
    for r in results:
        if r.assignment is None:
            continue
        for pid, group in r.assignment.group_of.items():
            buf.write(f"{r.category},{r.value},{pid},{r.assignment.values[pid]:.6g},{group}\n")
    return buf.getvalue()


def stratification_json(results) -> str:
    """Per-category summary: sizes, centroids, log-rank statistic and notes."""
    out = []
    for r in results:
        row = {"category": r.category, "value": r.value, "n": r.n, "note": r.note}
        if r.assignment is not None:
            row["sizes"] = {g: len(r.assignment.members(g)) for g in (HIGH, LOW)}
            row["centroids"] = {g: float(f"{c:.6g}") for g, c in r.assignment.centroids.items()}
        if r.logrank is not None:
            row["chi2"] = float(f"{r.logrank.chi2:.6g}")
            row["p"] = float(f"{r.logrank.p:.6g}")
        out.append(row)
    return json.dumps(out, indent=1) + "\n"
