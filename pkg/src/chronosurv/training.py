"""Optimizer, learning-rate schedule and the cross-validated training loop.

Every random draw comes from a generator seeded by ``(seed, fold, epoch)``, so
a run is reproducible bit-for-bit given its configuration and seed.
"""

from __future__ import annotations

import collections
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cohort as cohort_mod
from . import model as M
from .config import RunConfig, TrainConfig, config_to_text
from .errors import AbortEpochError, InvalidInputError
from .losses import focal_loss, scl
from .projection import build_collage
from .sampling import sample_epoch

log = logging.getLogger(__name__)


def n_threads() -> int:
    raw = os.environ.get("CHRONOSURV_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


# -------------------------------------------------------------------- Adam

@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    bad_epochs: int = 0
    best_val: float = float("inf")
    base_lr: float | None = None
    reductions: int = 0

    @classmethod
    def create(cls, params: M.ModelParams, lr: float) -> "OptimState":
        if lr < 0:
            raise InvalidInputError("learning rate must be non-negative")
        n = params.flat.size
        return cls(np.zeros(n), np.zeros(n), 0, lr, base_lr=lr)

    def copy(self) -> "OptimState":
        return OptimState(self.m.copy(), self.v.copy(), self.step, self.lr, self.bad_epochs, self.best_val,
                          self.base_lr, self.reductions)


def adam_step(params: M.ModelParams, grads: M.ModelParams, state: OptimState, hyper: TrainConfig | None = None):
    """One Adam update with bias correction and decoupled weight decay."""
    hp = hyper or TrainConfig()
    g = grads.flat
    if g.shape != params.flat.shape or state.m.shape != g.shape:
        raise InvalidInputError("parameter, gradient and moment shapes differ")
    bad = ~np.isfinite(g)
    if bad.any():
        names = sorted({name for name, off, shape in params.layout
                        if bad[off:off + int(np.prod(shape))].any()})
        raise AbortEpochError(f"non-finite gradient in {names}", {"parameters": names, "step": state.step})
    flat, new = adam_update(params.flat, g, state, hp)
    out = M.ModelParams(params.arch, flat)
    out.meta = params.meta
    return out, new


def adam_update(flat, g, state: OptimState, hp: TrainConfig, weight_decay=None):
    """Adam on a plain vector; returns ``(new_flat, new_state)``."""
    wd = hp.weight_decay if weight_decay is None else weight_decay
    new = state.copy()
    new.step += 1
    new.m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    new.v = hp.beta2 * state.v + (1.0 - hp.beta2) * g * g
    m_hat = new.m / (1.0 - hp.beta1 ** new.step)
    v_hat = new.v / (1.0 - hp.beta2 ** new.step)
    out = flat * (1.0 - state.lr * wd)
    out = out - state.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
    return out, new


def schedule_lr(state: OptimState, val_loss: float, factor=5.0, patience=5) -> OptimState:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without improvement.

    The new rate is ``base_lr / factor**n`` rather than a repeated division, so
    e.g. 1e-4 steps to exactly 2e-5 and then 4e-6.
    """
    new = state.copy()
    if val_loss < state.best_val - 1e-9:
        new.best_val = float(val_loss)
        new.bad_epochs = 0
    else:
        new.bad_epochs += 1
        if new.bad_epochs >= patience:
            new.reductions += 1
            base = state.lr * factor ** state.reductions if state.base_lr is None else state.base_lr
            new.lr = base / factor ** new.reductions
            new.bad_epochs = 0
    return new


# ---------------------------------------------------------------- inputs

def image_input(arch, volume_set) -> np.ndarray:
    collage = build_collage(volume_set)
    return M.pool_input(M.normalize_collage(collage), arch.input_pool)


def prepare_image_inputs(cohort, arch) -> dict:
    """Normalized, pooled network inputs for every patient (computed in parallel)."""
    ids = [p.id for p in cohort.patients]
    with ThreadPoolExecutor(max_workers=n_threads()) as pool:
        arrays = list(pool.map(lambda pid: image_input(arch, cohort.volumes[pid].load()), ids))
    return dict(zip(ids, arrays))


def tabular_inputs(patients, stats) -> dict:
    return {p.id: cohort_mod.featurize_tabular(p, stats).values for p in patients}


def flip_halves(x, rng) -> np.ndarray:
    """Independently mirror the coronal and sagittal halves with probability 0.5 each."""
    half = x.shape[-1] // 2
    flips = rng.random(2) < 0.5
    if not flips.any():
        return x
    out = x.copy()
    if flips[0]:
        out[..., :half] = x[..., :half][..., ::-1]
    if flips[1]:
        out[..., half:] = x[..., half:][..., ::-1]
    return out


# ---------------------------------------------------------------- losses

def _assemble(items):
    X = np.stack([x for x, _ in items])
    owner = np.concatenate([np.full(len(s), i) for i, (_, s) in enumerate(items)]).astype(np.int64)
    t = np.array([smp.t_norm for _, s in items for smp in s])
    y = np.array([smp.y for _, s in items for smp in s])
    return X, owner, t, y


def batch_loss(params, items, loss_cfg, want_grad=True):
    """Combined focal + SCL loss for ``items = [(prepared_input, samples), ...]``.

    Focal loss is averaged over all samples, SCL over patients.  Returns
    ``(loss, grads or None)``.
    """
    items = [(x, s) for x, s in items if s]
    if not items:
        return 0.0, (params.zeros_like() if want_grad else None)
    X, owner, t, y = _assemble(items)
    prob, cache = M.forward_batch(params, X, owner, t)
    fl, dfl = focal_loss(prob, y, loss_cfg)
    n, n_pat = len(prob), len(items)
    loss = float(fl.mean())
    d_prob = dfl / n
    if loss_cfg.lam > 0 and params.arch.use_time:
        scl_total = 0.0
        for i in range(n_pat):
            idx = np.flatnonzero(owner == i)
            value, grad = scl(t[idx], prob[idx])
            scl_total += value
            d_prob[idx] += loss_cfg.lam * grad / n_pat
        loss += loss_cfg.lam * scl_total / n_pat
    if not want_grad:
        return loss, None
    grads, _ = M.backward_batch(params, cache, d_prob)
    return loss, grads


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)
    grad_patients: collections.Counter = field(default_factory=collections.Counter)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_loss,lr\n")
        for epoch, tr, va, lr in self.rows:
            buf.write(f"{epoch},{tr:.6g},{va:.6g},{lr:.6g}\n")
        return buf.getvalue()


def _fold_inputs(cohort, arch, train_ids, image_inputs=None):
    if arch.encoder == "conv":
        return (image_inputs if image_inputs is not None else prepare_image_inputs(cohort, arch)), None
    by_id = cohort.by_id()
    stats = cohort_mod.compute_cohort_stats([by_id[i] for i in train_ids])
    return tabular_inputs(cohort.patients, stats), stats


def fit(params, train_items_fn, val_items, config: RunConfig, epochs, rng_key, on_batch=None):
    """Generic epoch loop shared by the proposed model and the baselines.

    ``train_items_fn(rng)`` yields lists of ``(ids, items)`` batches for one epoch.
    Returns ``(best_params, TrainLog)``.
    """
    tc = config.train
    state = OptimState.create(params, tc.lr)
    best, best_val = params.copy(), float("inf")
    tlog = TrainLog()
    if val_items and epochs > 0:
        # the untrained model's validation loss is the bar epoch 1 must beat
        best_val = state.best_val = _mean_loss(params, val_items, config)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([*rng_key, epoch])
        lr_used = state.lr
        losses = []
        for ids, items in train_items_fn(rng):
            loss, grads = batch_loss(params, items, config.loss)
            if not np.isfinite(loss):
                raise AbortEpochError(f"non-finite training loss at epoch {epoch}", {"epoch": epoch, "ids": ids})
            try:
                params, state = adam_step(params, grads, state, tc)
            except AbortEpochError as exc:
                exc.diagnostics.update(epoch=epoch, ids=list(ids))
                raise
            tlog.grad_patients.update(ids)
            losses.append(loss)
            if on_batch is not None:
                on_batch(ids)
        val_loss = _mean_loss(params, val_items, config) if val_items else float(np.mean(losses))
        state = schedule_lr(state, val_loss, tc.lr_factor, tc.lr_patience)
        if val_loss < best_val:
            best_val, best, tlog.best_epoch = val_loss, params.copy(), epoch
        tlog.rows.append((epoch, float(np.mean(losses)) if losses else 0.0, float(val_loss), lr_used))
    return best, tlog


def _mean_loss(params, items, config, chunk=32):
    """Sample-weighted mean combined loss, evaluated in chunks without gradients."""
    total, weight = 0.0, 0
    for start in range(0, len(items), chunk):
        part = [(x, s) for x, s in items[start:start + chunk] if s]
        if not part:
            continue
        loss, _ = batch_loss(params, part, config.loss, want_grad=False)
        total += loss * len(part)
        weight += len(part)
    return total / max(weight, 1)


def train_fold(cohort, fold_id, folds, config: RunConfig, seed, image_inputs=None):
    """Train on every fold except ``fold_id``; validate on ``fold_id``.

    Returns the parameters with the lowest validation loss and the epoch log.
    """
    arch = config.model
    val_ids = folds.members(fold_id)
    train_ids = folds.complement(fold_id)
    inputs, stats = _fold_inputs(cohort, arch, train_ids, image_inputs)
    by_id = cohort.by_id()

    params = M.init_params(arch, np.random.default_rng([seed, fold_id, 0xA11]))
    params.meta = {"fold": fold_id, "seed": seed}
    if stats is not None:
        params.meta["stats"] = vars(stats).copy()

    val_rng = np.random.default_rng([seed, fold_id, 0x5A1])
    val_items = [(inputs[i], sample_epoch(by_id[i], val_rng, config.sampling)) for i in val_ids]
    augment = config.train.augment and arch.encoder == "conv"
    bs = max(1, config.train.batch_size)

    def epoch_batches(rng):
        order = rng.permutation(len(train_ids))
        for start in range(0, len(order), bs):
            ids = [train_ids[j] for j in order[start:start + bs]]
            items = []
            for pid in ids:
                samples = sample_epoch(by_id[pid], rng, config.sampling)
                x = flip_halves(inputs[pid], rng) if augment else inputs[pid]
                items.append((x, samples))
            yield ids, items

    best, tlog = fit(params, epoch_batches, val_items, config, config.train.epochs, (seed, fold_id))
    leaked = set(tlog.grad_patients) & set(val_ids)
    assert not leaked, f"validation patients received gradients: {sorted(leaked)[:5]}"
    return best, tlog


def train_cv(cohort, k, config: RunConfig, seed, run_dir=None, image_inputs=None):
    """Stratified k-fold training; optionally writes ``fold<k>/checkpoint.bin`` and ``trainlog.csv``."""
    folds = cohort_mod.split_folds(cohort, k, seed)
    if config.model.encoder == "conv" and image_inputs is None:
        image_inputs = prepare_image_inputs(cohort, config.model)
    models, logs = [], []
    for f in range(k):
        params, tlog = train_fold(cohort, f, folds, config, seed, image_inputs)
        params.meta["val_ids"] = folds.members(f)
        models.append(params)
        logs.append(tlog)
        if run_dir is not None:
            fold_dir = Path(run_dir) / f"fold{f}"
            M.save_checkpoint(fold_dir / "checkpoint.bin", params, seed=seed, epoch=tlog.best_epoch,
                              meta=params.meta)
            (fold_dir / "trainlog.csv").write_text(tlog.to_csv())
        log.info("fold %d: best epoch %d", f, tlog.best_epoch)
    if run_dir is not None:
        (Path(run_dir) / "config.resolved").write_text(config_to_text(config))
    return models, logs


def load_models(run_dir):
    """Load every ``fold*/checkpoint.bin`` under ``run_dir`` in fold order."""
    paths = sorted(Path(run_dir).glob("fold*/checkpoint.bin"), key=lambda p: int(p.parent.name[4:]))
    models = []
    for path in paths:
        params, header = M.load_checkpoint(path)
        params.meta = header.get("meta", {})
        models.append(params)
    return models


# ------------------------------------------------------------- prediction

def model_inputs(params, cohort, image_inputs=None) -> dict:
    if params.arch.encoder == "conv":
        return image_inputs if image_inputs is not None else prepare_image_inputs(cohort, params.arch)
    stats = cohort_mod.CohortStats(**params.meta["stats"])
    return tabular_inputs(cohort.patients, stats)


def ensemble_probs(models, cohort, grid_days, horizon_days=1825, image_inputs=None) -> dict:
    """Mean predicted P(alive) over fold models, per patient, on ``grid_days`` (raw, not monotonized)."""
    t_norm = np.minimum(np.asarray(grid_days, dtype=float), horizon_days) / horizon_days
    out = {p.id: np.zeros(len(t_norm)) for p in cohort.patients}
    for params in models:
        inputs = model_inputs(params, cohort, image_inputs)
        for p in cohort.patients:
            out[p.id] += M.predict_probs(params, inputs[p.id], t_norm)
    return {pid: v / len(models) for pid, v in out.items()}
