"""Slow, loop-based reference implementations used as independent test oracles."""

import math

import numpy as np

from chronosurv.cohort import PatientRecord
from chronosurv.projection import VolumeSet


def make_patient(pid, time, event, follow=None, scan=0, **extra):
    """A PatientRecord with survival time ``time`` days after ``scan``."""
    follow = time if follow is None else follow
    fields = dict(age=68.0, sex="male", t_stage="T2", n_stage="N0", tmtv=1.0, dmax=0.0, lesion_count=1)
    fields.update(extra)
    return PatientRecord(id=pid, scan_day=scan, death_day=scan + time if event else None,
                         lfd_day=scan + follow, event=bool(event), **fields)


# ------------------------------------------------------------------ survival

def km_oracle(times, events):
    """Product-limit estimate at each distinct death time, by explicit counting."""
    pairs = list(zip(times, events))
    death_times = sorted({t for t, e in pairs if e})
    surv, s = [], 1.0
    for u in death_times:
        at_risk = 0
        deaths = 0
        for t, e in pairs:
            if t >= u:
                at_risk += 1
            if t == u and e:
                deaths += 1
        s *= (at_risk - deaths) / at_risk
        surv.append(s)
    return death_times, surv


def c_index_oracle(risk, times, events):
    num = 0.0
    den = 0
    n = len(risk)
    for i in range(n):
        for j in range(n):
            if events[i] and times[i] < times[j]:
                den += 1
                if risk[i] > risk[j]:
                    num += 1.0
                elif risk[i] == risk[j]:
                    num += 0.5
    return None if den == 0 else num / den


def auc_oracle(probs, patients, tau):
    cases, controls = [], []
    for prob, p in zip(probs, patients):
        died = p.event and (p.death_day - p.scan_day) <= tau
        if died:
            cases.append(prob)
        elif (p.lfd_day - p.scan_day) > tau:
            controls.append(prob)
    if not cases or not controls:
        return None
    total = 0.0
    for a in cases:
        for b in controls:
            total += 1.0 if a < b else (0.5 if a == b else 0.0)
    return total / (len(cases) * len(controls))


def logrank_oracle(group_a, group_b):
    """Mantel-Haenszel log-rank chi-square and its 1-df p-value."""
    ta, ea = list(group_a[0]), list(group_a[1])
    tb, eb = list(group_b[0]), list(group_b[1])
    death_times = sorted({t for t, e in zip(ta + tb, ea + eb) if e})
    o = e_sum = v = 0.0
    for u in death_times:
        n1 = sum(1 for t in ta if t >= u)
        n2 = sum(1 for t in tb if t >= u)
        d1 = sum(1 for t, e in zip(ta, ea) if t == u and e)
        d2 = sum(1 for t, e in zip(tb, eb) if t == u and e)
        n, d = n1 + n2, d1 + d2
        o += d1
        e_sum += d * n1 / n
        if n > 1:
            v += d * n1 * n2 * (n - d) / (n * n * (n - 1))
    chi2 = 0.0 if v == 0 else (o - e_sum) ** 2 / v
    return chi2, math.erfc(math.sqrt(chi2 / 2))


def auspc_oracle(grid, probs):
    area = 0.0
    for k in range(1, len(grid)):
        area += (grid[k] - grid[k - 1]) * (probs[k] + probs[k - 1]) / 2.0
    return area


def best_split_oracle(values):
    """Exhaustive optimal two-cluster split of 1-D values; returns the low-cluster set of indices."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    best, best_cost = None, math.inf
    for cut in range(1, len(order)):
        left = [values[i] for i in order[:cut]]
        right = [values[i] for i in order[cut:]]
        if left[-1] == right[0]:
            continue  # equal values stay together
        cost = sum((x - np.mean(left)) ** 2 for x in left) + sum((x - np.mean(right)) ** 2 for x in right)
        if cost < best_cost - 1e-12:
            best, best_cost = set(order[:cut]), cost
    return best


# ---------------------------------------------------------------- projection

def tissue_oracle(hu):
    out = {k: np.zeros(hu.shape, dtype=bool) for k in ("bone", "lean", "adipose", "air")}
    for idx in np.ndindex(hu.shape):
        v = hu[idx]
        if v >= 200:
            out["bone"][idx] = True
        if -29 <= v <= 150:
            out["lean"][idx] = True
        if -190 <= v <= -30:
            out["adipose"][idx] = True
        if v < -190:
            out["air"][idx] = True
    return out


def _columns(shape, axis):
    """Yield (output index, list of voxel indices) for a projection over ``axis``."""
    nz, ny, nx = shape
    if axis == 1:
        for z in range(nz):
            for x in range(nx):
                yield (z, x), [(z, y, x) for y in range(ny)]
    else:
        for z in range(nz):
            for y in range(ny):
                yield (z, y), [(z, y, x) for x in range(nx)]


def mip_oracle(vol, axis, mask=None):
    nz, ny, nx = vol.shape
    out = np.zeros((nz, nx) if axis == 1 else (nz, ny))
    for pos, voxels in _columns(vol.shape, axis):
        vals = [vol[v] for v in voxels if mask is None or mask[v]]
        out[pos] = max(vals) if vals else 0.0
    return out


def aip_oracle(vol, axis, mask=None):
    nz, ny, nx = vol.shape
    out = np.zeros((nz, nx) if axis == 1 else (nz, ny))
    for pos, voxels in _columns(vol.shape, axis):
        vals = [vol[v] for v in voxels if mask is None or mask[v]]
        out[pos] = sum(vals) / len(vals) if vals else 0.0
    return out


def canvas_oracle(img, target):
    """Place ``img`` on a zero canvas, cropping or padding per axis around the centre."""
    h, w = img.shape
    th, tw = target
    out = np.zeros(target, dtype=img.dtype)

    def offsets(cur, size):
        if cur >= size:
            return (cur - size) // 2, 0  # source start, destination start
        return 0, (size - cur) // 2

    sy, dy = offsets(h, th)
    sx, dx = offsets(w, tw)
    for i in range(min(h, th)):
        for j in range(min(w, tw)):
            out[dy + i, dx + j] = img[sy + i, sx + j]
    return out


def random_volumes(seed, shape=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    hu = rng.integers(-400, 400, size=shape).astype(np.float64)
    suv = rng.gamma(1.5, 2.0, size=shape)
    mask = (rng.random(shape) < 0.2).astype(np.uint8)
    return VolumeSet(hu, suv, mask)


def collage_oracle(vs):
    hu, suv, tumor = vs.hu, vs.suv, vs.tumor_mask.astype(bool)
    t = tissue_oracle(hu)
    tissues = [t["bone"], t["lean"], t["adipose"], t["air"]]
    chans = [lambda ax: mip_oracle(suv, ax)]
    chans += [lambda ax, m=m: mip_oracle(suv, ax, m) for m in tissues]
    chans += [lambda ax: aip_oracle(hu, ax)]
    chans += [lambda ax, m=m: aip_oracle(hu, ax, m) for m in tissues]
    chans += [lambda ax: mip_oracle(suv, ax, tumor), lambda ax: aip_oracle(suv, ax, tumor)]
    return np.stack([np.concatenate([canvas_oracle(f(1), (400, 256)), canvas_oracle(f(2), (400, 256))], axis=1)
                     for f in chans])


def kendall_tau_oracle(x, y):
    """Kendall tau-a by enumerating every pair."""
    n = len(x)
    s = 0
    for i in range(n):
        for j in range(i + 1, n):
            s += np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
    return s / (n * (n - 1) / 2)
