"""Time-conditioned survival network with exact manual gradients.

    image  -> conv(3x3, s2) x3 -> global average pool -> dense -> e_img (D)
    t_norm -> dense(1->H) -> ReLU -> dense(H->D)                  -> e_t (D)
    prob    = sigmoid(dense(ReLU(dense(e_img * e_t))))

All parameters live in one flat float64 array; ``ModelParams[name]`` returns a
reshaped view so optimizers can work on the flat vector directly.  The
``dense`` encoder variant swaps the conv stack for ``15 -> 64 -> D`` over a
tabular feature vector; ``use_time=False`` drops the temporal branch and feeds
the image embedding straight into the classifier (fixed-horizon models).

Batched entry points (:func:`forward_batch` / :func:`backward_batch`) encode each
input once and evaluate it at any number of time points, which is what makes
per-patient time sampling cheap.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .config import ArchConfig
from .errors import ContractViolation, InvalidInputError, NonFiniteInputError
from .projection import COLLAGE_SHAPE, ProjectionCollage

_MAGIC = b"CSCK"


# ------------------------------------------------------------------ layout

def layout_table(arch: ArchConfig):
    """Ordered ``(name, offset, shape)`` triples covering the flat parameter vector."""
    shapes = []
    D = arch.embed_dim
    if arch.encoder == "conv":
        c_in = arch.in_channels
        for i, width in enumerate(arch.conv_widths):
            shapes += [(f"enc.conv{i}.w", (width, c_in, 3, 3)), (f"enc.conv{i}.b", (width,))]
            c_in = width
        shapes += [("enc.proj.w", (D, c_in)), ("enc.proj.b", (D,))]
    elif arch.encoder == "dense":
        shapes += [("enc.fc1.w", (arch.dense_hidden, arch.n_features)), ("enc.fc1.b", (arch.dense_hidden,)),
                   ("enc.proj.w", (D, arch.dense_hidden)), ("enc.proj.b", (D,))]
    else:
        raise InvalidInputError(f"unknown encoder type {arch.encoder!r}")
    if arch.use_time:
        shapes += [("time.fc1.w", (arch.time_hidden, 1)), ("time.fc1.b", (arch.time_hidden,)),
                   ("time.fc2.w", (D, arch.time_hidden)), ("time.fc2.b", (D,))]
    shapes += [("cls.fc1.w", (arch.cls_hidden, D)), ("cls.fc1.b", (arch.cls_hidden,)),
               ("cls.fc2.w", (1, arch.cls_hidden)), ("cls.fc2.b", (1,))]
    table, offset = [], 0
    for name, shape in shapes:
        table.append((name, offset, tuple(shape)))
        offset += int(np.prod(shape))
    return table


def param_count(arch: ArchConfig) -> int:
    name, offset, shape = layout_table(arch)[-1]
    return offset + int(np.prod(shape))


def layout_hash(arch: ArchConfig) -> str:
    table = [[n, o, list(s)] for n, o, s in layout_table(arch)]
    return hashlib.sha256(json.dumps(table).encode()).hexdigest()[:16]


class ModelParams:
    """Flat parameter (or gradient) store with named views."""

    def __init__(self, arch: ArchConfig, flat=None):
        self.arch = arch
        self.layout = layout_table(arch)
        self._index = {name: (off, shape) for name, off, shape in self.layout}
        self.meta = {}
        n = param_count(arch)
        self.flat = np.zeros(n) if flat is None else np.asarray(flat, dtype=np.float64)
        if self.flat.shape != (n,):
            raise ContractViolation(f"flat vector has shape {self.flat.shape}, layout needs ({n},)")

    def __getitem__(self, name):
        off, shape = self._index[name]
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def __setitem__(self, name, value):
        view = self[name]
        if value is not view:
            view[...] = value

    def __contains__(self, name):
        return name in self._index

    def names(self):
        return [name for name, _, _ in self.layout]

    @property
    def key(self):
        return layout_hash(self.arch)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.arch)

    def copy(self) -> "ModelParams":
        out = ModelParams(self.arch, self.flat.copy())
        out.meta = dict(self.meta)
        return out


GradientStore = ModelParams


def init_params(arch: ArchConfig, rng) -> ModelParams:
    """He-style uniform init scaled by fan-in; biases start at zero."""
    params = ModelParams(arch)
    for name, _, shape in params.layout:
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


# ------------------------------------------------------------------- layers

def _conv_forward(x, w, b):
    """3x3 convolution, stride 2, zero padding 1.  ``x`` is ``(B, C, H, W)``."""
    B, C, H, W = x.shape
    F = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    Ho, Wo = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    sB, sC, sH, sW = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(C, 3, 3, B, Ho, Wo), strides=(sC, sH, sW, sB, 2 * sH, 2 * sW), writeable=False
    )
    cols = win.reshape(C * 9, B * Ho * Wo)
    out = w.reshape(F, -1) @ cols + b[:, None]
    return out.reshape(F, B, Ho, Wo).transpose(1, 0, 2, 3), (x.shape, cols)


def _conv_backward(dout, w, cache, need_dx=True):
    (B, C, H, W), cols = cache
    F, Ho, Wo = dout.shape[1:]
    d2 = dout.transpose(1, 0, 2, 3).reshape(F, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(F, -1).T @ d2).reshape(C, 3, 3, B, Ho, Wo)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for kh in range(3):
        for kw in range(3):
            dxp[:, :, kh:kh + 2 * Ho:2, kw:kw + 2 * Wo:2] += dcols[:, kh, kw].transpose(1, 0, 2, 3)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _relu(z):
    return np.maximum(z, 0.0)


# ------------------------------------------------------------------- inputs

def normalize_collage(collage) -> np.ndarray:
    """Per-channel min-max scaling to [0, 1]; constant channels become 0."""
    arr = collage.channels if isinstance(collage, ProjectionCollage) else collage
    arr = np.asarray(arr, dtype=np.float64)
    lo = arr.min(axis=(1, 2), keepdims=True)
    span = arr.max(axis=(1, 2), keepdims=True) - lo
    out = np.zeros_like(arr)
    np.divide(arr - lo, span, out=out, where=span > 0)
    return out


def pool_input(x, factor: int) -> np.ndarray:
    """Average-pool the trailing two axes by ``factor`` (the network's first stage)."""
    if factor == 1:
        return np.asarray(x, dtype=np.float64)
    *lead, H, W = x.shape
    if H % factor or W % factor:
        raise InvalidInputError(f"input {H}x{W} not divisible by pool factor {factor}")
    return x.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1))


def prepare_input(arch: ArchConfig, x) -> np.ndarray:
    """Validate a single raw model input and apply the fixed input pooling."""
    if isinstance(x, ProjectionCollage):
        x = x.channels
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("model input contains non-finite values")
    if arch.encoder == "conv":
        if x.shape != (arch.in_channels,) + COLLAGE_SHAPE[1:]:
            raise InvalidInputError(f"collage must be {(arch.in_channels,) + COLLAGE_SHAPE[1:]}, got {x.shape}")
        return pool_input(x, arch.input_pool)
    if x.shape != (arch.n_features,):
        raise InvalidInputError(f"feature vector must have length {arch.n_features}, got {x.shape}")
    return x


# ------------------------------------------------------------ batched core

def encode(params: ModelParams, X):
    """Embed a batch of prepared inputs; returns ``(emb (B, D), cache)``."""
    arch = params.arch
    caches = []
    if arch.encoder == "conv":
        h = X
        for i in range(len(arch.conv_widths)):
            z, conv_cache = _conv_forward(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"])
            caches.append((conv_cache, z))
            h = _relu(z)
        pooled = h.mean(axis=(2, 3))
        emb = pooled @ params["enc.proj.w"].T + params["enc.proj.b"]
        return emb, {"convs": caches, "last_shape": h.shape, "pooled": pooled}
    z1 = X @ params["enc.fc1.w"].T + params["enc.fc1.b"]
    h1 = _relu(z1)
    emb = h1 @ params["enc.proj.w"].T + params["enc.proj.b"]
    return emb, {"x": X, "z1": z1, "h1": h1}


def encode_backward(params: ModelParams, cache, d_emb, grads: ModelParams, need_dx=False):
    arch = params.arch
    if arch.encoder == "conv":
        grads["enc.proj.w"] += d_emb.T @ cache["pooled"]
        grads["enc.proj.b"] += d_emb.sum(axis=0)
        d_pooled = d_emb @ params["enc.proj.w"]
        B, F, Ho, Wo = cache["last_shape"]
        dh = np.broadcast_to(d_pooled[:, :, None, None] / (Ho * Wo), cache["last_shape"])
        dx = None
        for i in reversed(range(len(arch.conv_widths))):
            conv_cache, z = cache["convs"][i]
            dz = dh * (z > 0)
            dx, dw, db = _conv_backward(dz, params[f"enc.conv{i}.w"], conv_cache, need_dx=(i > 0 or need_dx))
            grads[f"enc.conv{i}.w"] += dw
            grads[f"enc.conv{i}.b"] += db
            dh = dx
        return dx
    grads["enc.proj.w"] += d_emb.T @ cache["h1"]
    grads["enc.proj.b"] += d_emb.sum(axis=0)
    dz1 = (d_emb @ params["enc.proj.w"]) * (cache["z1"] > 0)
    grads["enc.fc1.w"] += dz1.T @ cache["x"]
    grads["enc.fc1.b"] += dz1.sum(axis=0)
    return dz1 @ params["enc.fc1.w"] if need_dx else None


def head(params: ModelParams, emb_rows, t_norm):
    """Fuse per-sample image embeddings ``(M, D)`` with times ``(M,)``; returns probs ``(M,)``."""
    cache = {"emb": emb_rows}
    if params.arch.use_time:
        t = np.asarray(t_norm, dtype=np.float64).reshape(-1, 1)
        zt = t @ params["time.fc1.w"].T + params["time.fc1.b"]
        ht = _relu(zt)
        e_t = ht @ params["time.fc2.w"].T + params["time.fc2.b"]
        fused = emb_rows * e_t
        cache.update(t=t, zt=zt, ht=ht, e_t=e_t)
    else:
        fused = emb_rows
    zc = fused @ params["cls.fc1.w"].T + params["cls.fc1.b"]
    hc = _relu(zc)
    logit = hc @ params["cls.fc2.w"][0] + params["cls.fc2.b"][0]
    prob = expit(logit)
    cache.update(fused=fused, zc=zc, hc=hc, prob=prob)
    return prob, cache


def head_backward(params: ModelParams, cache, d_prob, grads: ModelParams):
    """Accumulate head gradients; returns d(loss)/d(emb_rows)."""
    prob = cache["prob"]
    d_logit = np.asarray(d_prob, dtype=np.float64) * prob * (1.0 - prob)
    grads["cls.fc2.w"] += (d_logit @ cache["hc"])[None, :]
    grads["cls.fc2.b"] += d_logit.sum()
    dzc = np.outer(d_logit, params["cls.fc2.w"][0]) * (cache["zc"] > 0)
    grads["cls.fc1.w"] += dzc.T @ cache["fused"]
    grads["cls.fc1.b"] += dzc.sum(axis=0)
    d_fused = dzc @ params["cls.fc1.w"]
    if not params.arch.use_time:
        return d_fused
    d_et = d_fused * cache["emb"]
    grads["time.fc2.w"] += d_et.T @ cache["ht"]
    grads["time.fc2.b"] += d_et.sum(axis=0)
    dzt = (d_et @ params["time.fc2.w"]) * (cache["zt"] > 0)
    grads["time.fc1.w"] += dzt.T @ cache["t"]
    grads["time.fc1.b"] += dzt.sum(axis=0)
    return d_fused * cache["e_t"]


@dataclass
class BatchCache:
    layout_key: str
    enc_cache: dict
    head_cache: dict
    owner: np.ndarray  # sample -> row of the encoded batch
    n_inputs: int
    input_shape: tuple


def forward_batch(params: ModelParams, X, owner, t_norm):
    """Evaluate prepared inputs ``X (B, ...)`` at samples ``(owner[m], t_norm[m])``."""
    owner = np.asarray(owner, dtype=np.int64)
    emb, enc_cache = encode(params, X)
    prob, head_cache = head(params, emb[owner], t_norm)
    return prob, BatchCache(params.key, enc_cache, head_cache, owner, len(X), tuple(np.shape(X)))


def backward_batch(params: ModelParams, cache: BatchCache, d_prob, grads: ModelParams | None = None,
                   need_dx=False):
    """Gradients of ``sum_m d_prob[m] * prob[m]``; returns ``(grads, dX or None)``."""
    if cache.layout_key != params.key:
        raise ContractViolation("activation cache was produced by a different architecture")
    d_prob = np.asarray(d_prob, dtype=np.float64).reshape(-1)
    if d_prob.shape != cache.owner.shape:
        raise ContractViolation(f"d_prob has {d_prob.size} entries, cache holds {cache.owner.size} samples")
    grads = params.zeros_like() if grads is None else grads
    d_rows = head_backward(params, cache.head_cache, d_prob, grads)
    d_emb = np.zeros((cache.n_inputs, params.arch.embed_dim))
    np.add.at(d_emb, cache.owner, d_rows)
    dx = encode_backward(params, cache.enc_cache, d_emb, grads, need_dx=need_dx)
    return grads, dx


# --------------------------------------------------------- single-sample API

@dataclass
class ActivationCache:
    batch: BatchCache


def forward(params: ModelParams, collage, t_norm: float):
    """Probability of being alive at normalized time ``t_norm`` for one input.

    ``collage`` must already be min-max normalized (see :func:`normalize_collage`);
    for the dense encoder it is the tabular feature vector.
    """
    t = float(t_norm)
    if not np.isfinite(t):
        raise NonFiniteInputError("t_norm is not finite")
    if params.arch.use_time and not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"t_norm must lie in [0, 1], got {t}")
    x = prepare_input(params.arch, collage)
    prob, cache = forward_batch(params, x[None], [0], [t])
    return float(prob[0]), ActivationCache(cache)


def backward(params: ModelParams, cache: ActivationCache, d_prob: float) -> GradientStore:
    if not isinstance(cache, ActivationCache):
        raise ContractViolation("backward needs the cache returned by forward")
    grads, _ = backward_batch(params, cache.batch, [d_prob])
    return grads


def predict_probs(params: ModelParams, x_prepared, t_norms) -> np.ndarray:
    """Probabilities for one prepared input at many times (one encoder pass)."""
    t_norms = np.asarray(t_norms, dtype=np.float64)
    prob, _ = forward_batch(params, np.asarray(x_prepared)[None], np.zeros(len(t_norms), dtype=int), t_norms)
    return prob


@dataclass
class SurvivalCurve:
    grid_days: np.ndarray
    probs: np.ndarray
    monotonized: bool = False


def monotonize(probs) -> np.ndarray:
    """Running minimum along the grid, giving a non-increasing curve."""
    return np.minimum.accumulate(np.asarray(probs, dtype=np.float64))


def predict_curve(params: ModelParams, collage, grid_days, monotonize_output=False,
                  horizon_days=1825) -> SurvivalCurve:
    from .sampling import normalize_time

    grid = np.asarray(grid_days)
    if grid.size == 0:
        raise InvalidInputError("evaluation grid is empty")
    if np.any(np.diff(grid) <= 0):
        raise InvalidInputError("evaluation grid must be strictly increasing")
    x = prepare_input(params.arch, collage)
    probs = predict_probs(params, x, [normalize_time(t, horizon_days) for t in grid])
    if monotonize_output:
        probs = monotonize(probs)
    return SurvivalCurve(grid.copy(), probs, monotonize_output)


def saliency(params: ModelParams, collage, t_norm: float) -> np.ndarray:
    """Input-gradient heat map: max over channels of |d prob / d pixel|, scaled to [0, 1]."""
    arch = params.arch
    if arch.encoder != "conv":
        raise InvalidInputError("saliency needs an image encoder")
    x = prepare_input(arch, collage)
    prob, cache = forward_batch(params, x[None], [0], [float(t_norm)])
    _, dx = backward_batch(params, cache, [1.0], need_dx=True)
    grad = dx[0]
    f = arch.input_pool
    if f > 1:
        grad = np.repeat(np.repeat(grad, f, axis=1), f, axis=2) / (f * f)
    heat = np.abs(grad).max(axis=0)
    top = heat.max()
    return heat / top if top > 0 else np.zeros_like(heat)


def saliency_overlap(heat, mask, quantile=0.9) -> float:
    """Share of top-decile saliency pixels that fall inside ``mask``.

    The decile is taken over pixels with positive saliency; a map that is zero
    everywhere has no top decile and returns NaN.
    """
    heat = np.asarray(heat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if heat.shape != mask.shape:
        raise InvalidInputError(f"heat map {heat.shape} and mask {mask.shape} differ in shape")
    positive = heat[heat > 0]
    if positive.size == 0:
        return float("nan")
    top = heat >= np.quantile(positive, quantile)
    return float((top & mask).sum() / top.sum())


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, seed=0, epoch=0, meta=None) -> Path:
    """Write ``CSCK | u32 header length | JSON header | float64 LE parameters``."""
    header = {
        "arch": dataclasses.asdict(params.arch),
        "layout": [[n, o, list(s)] for n, o, s in params.layout],
        "layout_hash": params.key,
        "seed": int(seed),
        "epoch": int(epoch),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_MAGIC + struct.pack("<I", len(blob)) + blob + params.flat.astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(params, header)``; raises ContractViolation on layout mismatch."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    arch_fields = dict(header["arch"])
    for key, value in arch_fields.items():
        if isinstance(value, list):
            arch_fields[key] = tuple(value)
    arch = ArchConfig(**arch_fields)
    if layout_hash(arch) != header["layout_hash"]:
        raise ContractViolation(f"{path}: layout hash mismatch")
    flat = np.frombuffer(raw[8 + n:], dtype="<f8").astype(np.float64)
    return ModelParams(arch, flat), header
