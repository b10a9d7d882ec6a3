"""Comparison arms: fixed-horizon classifiers, Cox models, tabular model, ensemble."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cohort as cohort_mod
from . import model as M
from . import training as T
from .config import RunConfig, TrainConfig
from .errors import InvalidInputError, UndefinedMetricError
from .losses import cox_partial_nll
from .sampling import ALIVE, DECEASED, TimeSample
from .survstats import HORIZONS_YEARS, horizon_status, years_to_days

log = logging.getLogger(__name__)


def label_at_horizon(patient, tau_days):
    """``"deceased"`` if dead by ``tau`` (inclusive), ``"alive"`` if followed past it, else None."""
    if tau_days <= 0:
        raise InvalidInputError(f"horizon must be positive, got {tau_days}")
    status = horizon_status(patient, tau_days)
    if status is None:
        return None
    return DECEASED if status else ALIVE


# ------------------------------------------------------------ horizon bank

@dataclass
class HorizonModelBank:
    horizons_years: tuple
    models: dict  # years -> ModelParams, or None when untrainable
    eligible: dict = field(default_factory=dict)  # years -> (n_alive, n_deceased)

    def __post_init__(self):
        if len(self.horizons_years) != 10:
            raise InvalidInputError("a horizon bank holds exactly 10 horizons")

    def trainable(self):
        return [y for y in self.horizons_years if self.models.get(y) is not None]


def horizon_arch(config: RunConfig):
    return dataclasses.replace(config.model, use_time=False)


def bank_dir(run_dir, years) -> Path:
    return Path(run_dir) / "baseline" / f"h{int(round(years * 12))}"


def train_horizon_bank(cohort, config: RunConfig, seed, image_inputs=None, run_dir=None) -> HorizonModelBank:
    """One time-free classifier per horizon, trained with focal loss only."""
    arch = horizon_arch(config)
    cfg = dataclasses.replace(config, model=arch, loss=dataclasses.replace(config.loss, lam=0.0))
    if image_inputs is None:
        image_inputs = T.prepare_image_inputs(cohort, arch)
    bs = max(1, cfg.train.batch_size)
    models, eligible = {}, {}
    for h, years in enumerate(HORIZONS_YEARS):
        tau = years_to_days(years)
        labelled = [(p.id, label_at_horizon(p, tau)) for p in cohort.patients]
        labelled = [(pid, lab) for pid, lab in labelled if lab is not None]
        n_alive = sum(lab == ALIVE for _, lab in labelled)
        eligible[years] = (n_alive, len(labelled) - n_alive)
        if n_alive == 0 or n_alive == len(labelled):
            log.warning("horizon %.1f y untrainable: single-class labels", years)
            models[years] = None
            continue
        t_norm = min(tau, cfg.sampling.horizon_days) / cfg.sampling.horizon_days
        samples = {pid: [TimeSample(pid, int(tau), t_norm, lab)] for pid, lab in labelled}
        ids = [pid for pid, _ in labelled]

        def batches(rng, ids=ids, samples=samples):
            order = rng.permutation(len(ids))
            for start in range(0, len(order), bs):
                chunk = [ids[j] for j in order[start:start + bs]]
                items = [(T.flip_halves(image_inputs[i], rng) if cfg.train.augment else image_inputs[i],
                          samples[i]) for i in chunk]
                yield chunk, items

        params = M.init_params(arch, np.random.default_rng([seed, h, 0xB4]))
        params.meta = {"horizon_years": years, "seed": seed}
        best, tlog = T.fit(params, batches, None, cfg, cfg.train.epochs, (seed, 100 + h))
        models[years] = best
        if run_dir is not None:
            M.save_checkpoint(bank_dir(run_dir, years) / "checkpoint.bin", best, seed=seed,
                              epoch=tlog.best_epoch, meta=best.meta)
    return HorizonModelBank(tuple(HORIZONS_YEARS), models, eligible)


def load_horizon_bank(run_dir) -> HorizonModelBank:
    models = {}
    for years in HORIZONS_YEARS:
        path = bank_dir(run_dir, years) / "checkpoint.bin"
        if path.exists():
            params, header = M.load_checkpoint(path)
            params.meta = header.get("meta", {})
            models[years] = params
        else:
            models[years] = None
    return HorizonModelBank(tuple(HORIZONS_YEARS), models)


def bank_probs(bank: HorizonModelBank, cohort, image_inputs=None) -> dict:
    """``years -> [P(alive) per patient]`` in cohort order; None for untrainable horizons."""
    out = {}
    for years in bank.horizons_years:
        params = bank.models.get(years)
        if params is None:
            out[years] = None
            continue
        if image_inputs is None:
            image_inputs = T.prepare_image_inputs(cohort, params.arch)
        out[years] = [float(M.predict_probs(params, image_inputs[p.id], [0.0])[0]) for p in cohort.patients]
    return out


# ------------------------------------------------------------ tabular arm

def tabular_config(config: RunConfig) -> RunConfig:
    arch = dataclasses.replace(config.model, encoder="dense", input_pool=1)
    return dataclasses.replace(config, model=arch)


def tabular_proposed(features, t_norm, params) -> float:
    """P(alive) at ``t_norm`` from the dense-encoder variant of the survival network."""
    values = features.values if isinstance(features, cohort_mod.FeatureVector) else features
    prob, _ = M.forward(params, values, t_norm)
    return prob


def ensemble(prob_a, prob_b):
    """Unweighted mean of two probabilities (scalars or arrays)."""
    a = np.asarray(prob_a, dtype=np.float64)
    b = np.asarray(prob_b, dtype=np.float64)
    if np.any((a < 0) | (a > 1) | (b < 0) | (b > 1)):
        raise InvalidInputError("ensemble inputs must be probabilities")
    out = 0.5 * (a + b)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- Cox arm

@dataclass
class CoxModel:
    weights: dict
    steps: int
    nll_trace: list
    base_times: np.ndarray = None
    base_cumhaz: np.ndarray = None

    def risk(self, X):
        X = np.asarray(X, dtype=np.float64)
        if "W1" in self.weights:
            h = np.maximum(X @ self.weights["W1"] + self.weights["b1"], 0.0)
            return h @ self.weights["w2"]
        return X @ self.weights["w"]

    def survival(self, X, t_days):
        """Breslow estimate of S(t | x) for each row of ``X``."""
        idx = np.searchsorted(self.base_times, t_days, side="right")
        h0 = 0.0 if idx == 0 else float(self.base_cumhaz[idx - 1])
        return np.exp(-h0 * np.exp(self.risk(X)))


def _cox_unpack(theta, d, hidden):
    if hidden == 0:
        return {"w": theta}
    W1 = theta[:d * hidden].reshape(d, hidden)
    b1 = theta[d * hidden:d * hidden + hidden]
    w2 = theta[d * hidden + hidden:]
    return {"W1": W1, "b1": b1, "w2": w2}


def _cox_objective(theta, X, times, events, hidden):
    n_events = events.sum()
    d = X.shape[1]
    w = _cox_unpack(theta, d, hidden)
    if hidden == 0:
        r = X @ w["w"]
        value, g_r = cox_partial_nll(r, times, events)
        return value / n_events, (X.T @ g_r) / n_events
    z = X @ w["W1"] + w["b1"]
    h = np.maximum(z, 0.0)
    r = h @ w["w2"]
    value, g_r = cox_partial_nll(r, times, events)
    g_w2 = h.T @ g_r
    dz = np.outer(g_r, w["w2"]) * (z > 0)
    grad = np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0), g_w2])
    return value / n_events, grad / n_events


def cox_tabular(X, times, events, train: TrainConfig | None = None, seed=0, hidden=None,
                tol=1e-6) -> CoxModel:
    """Fit a linear (``hidden=0``) or one-hidden-layer Cox model by Adam on the partial likelihood."""
    tc = train or TrainConfig()
    hidden = tc.cox_hidden if hidden is None else hidden
    X = np.asarray(X, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if not events.any():
        raise UndefinedMetricError("Cox partial likelihood undefined without events")
    d = X.shape[1]
    rng = np.random.default_rng([seed, 0xC0C5])
    if hidden == 0:
        theta = np.zeros(d)
    else:
        theta = np.concatenate([rng.uniform(-1, 1, d * hidden) * np.sqrt(6.0 / d), np.zeros(hidden),
                                rng.uniform(-1, 1, hidden) * np.sqrt(6.0 / hidden)])
    state = T.OptimState(np.zeros_like(theta), np.zeros_like(theta), 0, tc.cox_lr)
    trace = []
    step = 0
    for step in range(1, tc.cox_steps + 1):
        value, grad = _cox_objective(theta, X, times, events, hidden)
        trace.append(value)
        if np.linalg.norm(grad) < tol:
            break
        theta, state = T.adam_update(theta, grad, state, tc, weight_decay=0.0)
    model = CoxModel(_cox_unpack(theta, d, hidden), step, trace)
    _fit_breslow(model, X, times, events)
    return model


def _fit_breslow(model: CoxModel, X, times, events):
    w = np.exp(model.risk(X))
    uniq = np.unique(times[events])
    increments = [events[times == u].sum() / w[times >= u].sum() for u in uniq]
    model.base_times = uniq
    model.base_cumhaz = np.cumsum(increments)
