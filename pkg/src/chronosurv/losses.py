"""Training losses with analytic gradients.

The survival network outputs the probability of being *alive*, so ``y = 1``
means alive.  The focal balance factor weights alive samples by ``alpha`` and
deceased samples by 1, so ``alpha = 1, gamma = 0`` is plain cross-entropy for
both classes.
"""

from __future__ import annotations

import numpy as np

from .config import LossConfig
from .errors import UndefinedMetricError

P_CLAMP = 1e-7


def focal_loss(p, y, cfg: LossConfig | None = None):
    """Element-wise focal loss and its derivative with respect to ``p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` before use; the derivative is zero
    where the clamp is active.
    """
    cfg = cfg or LossConfig()
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    p_t = np.where(y, pc, 1.0 - pc)
    a_t = np.where(y, cfg.alpha, 1.0)
    g = cfg.gamma
    log_pt = np.log(p_t)
    one_minus = 1.0 - p_t
    value = -a_t * one_minus ** g * log_pt
    if g == 0:
        d_pt = -a_t / p_t
    else:
        d_pt = a_t * (g * one_minus ** (g - 1.0) * log_pt - one_minus ** g / p_t)
    grad = np.where(y, d_pt, -d_pt)
    grad = np.where((p > P_CLAMP) & (p < 1.0 - P_CLAMP), grad, 0.0)
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def scl(t, p=None):
    """Survival consistency loss for one patient's sampled curve.

    Mean over all ordered pairs ``t_i < t_j`` of ``max(0, p_j - p_i)``.  Accepts
    either ``scl(ts, ps)`` or a list of ``(t, p)`` pairs.  Returns
    ``(value, d value / d p)``; fewer than two distinct times give 0.
    """
    if p is None:
        pairs = list(t)
        t = [a for a, _ in pairs]
        p = [b for _, b in pairs]
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros_like(p)
    if p.size < 2:
        return 0.0, grad
    earlier = t[:, None] < t[None, :]  # [i, j]: t_i < t_j
    n_pairs = int(earlier.sum())
    if n_pairs == 0:
        return 0.0, grad
    rise = p[None, :] - p[:, None]  # p_j - p_i
    active = earlier & (rise > 0)
    value = float(np.where(active, rise, 0.0).sum() / n_pairs)
    grad += active.sum(axis=0) / n_pairs  # as the later point j
    grad -= active.sum(axis=1) / n_pairs  # as the earlier point i
    return value, grad


def combined_loss(focal_terms, scl_terms, cfg: LossConfig | None = None) -> float:
    """Mean focal loss over samples plus ``lambda`` times mean SCL over patients."""
    cfg = cfg or LossConfig()
    focal_terms = np.asarray(focal_terms, dtype=np.float64)
    scl_terms = np.asarray(scl_terms, dtype=np.float64)
    total = float(focal_terms.mean()) if focal_terms.size else 0.0
    if scl_terms.size:
        total += cfg.lam * float(scl_terms.mean())
    return total


def cox_partial_nll(risk_scores, times, events):
    """Negative Breslow partial log-likelihood and its gradient in the risk scores."""
    r = np.asarray(risk_scores, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events).astype(bool)
    if not (r.shape == t.shape == d.shape):
        raise ValueError("risk_scores, times and events must have the same length")
    if not d.any():
        raise UndefinedMetricError("partial likelihood undefined without events")
    order = np.argsort(-t, kind="stable")
    ts, rs, ds = t[order], r[order], d[order]
    m = rs.max()
    w = np.exp(rs - m)
    cw = np.cumsum(w)
    neg = -ts  # ascending
    last = np.searchsorted(neg, neg, side="right") - 1
    first = np.searchsorted(neg, neg, side="left")
    risk_sum = cw[last]  # sum of exp(r_j - m) over t_j >= t_i
    value = -float(np.sum((rs - (np.log(risk_sum) + m))[ds]))
    inv = np.where(ds, 1.0 / risk_sum, 0.0)
    suffix = np.cumsum(inv[::-1])[::-1]  # sum over events with t_i <= t_k
    grad_sorted = w * suffix[first] - ds
    grad = np.empty_like(grad_sorted)
    grad[order] = grad_sorted
    return value, grad
