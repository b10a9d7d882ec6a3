"""SVG figures: Kaplan-Meier comparisons, predicted curves and saliency overlays.

Figures are drawn on bare ``Figure`` objects (no pyplot state) and written with
a fixed hash salt and no date stamp, so identical inputs give identical files.
Step functions and censor marks carry ``gid`` attributes (``km-<group>`` and
``censor-<group>``) that survive into the SVG as element ids.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib import rcParams  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

from .survstats import km_fit  # noqa: E402

rcParams["svg.hashsalt"] = "chronosurv"
rcParams["svg.fonttype"] = "none"

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _slug(label) -> str:
    return str(label).strip().lower().replace(" ", "-")


def _step_xy(curve, horizon):
    xs = np.concatenate([[0.0], curve.event_times, [horizon]])
    ys = np.concatenate([[1.0], curve.survival, [curve.survival[-1] if curve.survival.size else 1.0]])
    return xs, ys


def km_plot(groups: dict, path, title="", predicted: dict | None = None, horizon=1825):
    """One Kaplan-Meier step path per group, with censor ticks.

    ``groups`` maps a label to ``(times, events)``; ``predicted`` optionally maps
    labels to ``(grid_days, probs)`` drawn as dashed polylines.
    """
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for i, (label, (times, events)) in enumerate(groups.items()):
        color = _COLORS[i % len(_COLORS)]
        curve = km_fit(times, events)
        xs, ys = _step_xy(curve, horizon)
        n = len(times)
        ax.step(xs, ys, where="post", color=color, label=f"{label} (n={n})", gid=f"km-{_slug(label)}")
        marks = curve.censor_marks[curve.censor_marks <= horizon]
        ax.plot(marks, curve(marks), linestyle="none", marker="|", markersize=8, color=color,
                gid=f"censor-{_slug(label)}")
    for i, (label, (grid, probs)) in enumerate((predicted or {}).items()):
        ax.plot(grid, probs, linestyle="--", color=_COLORS[(i + len(groups)) % len(_COLORS)],
                label=str(label), gid=f"pred-{_slug(label)}")
    ax.set_xlim(0, horizon)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("days from scan")
    ax.set_ylabel("survival probability")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def curves_plot(curves: dict, path, title="", max_curves=20):
    """Predicted per-patient survival curves."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for i, (pid, curve) in enumerate(sorted(curves.items())[:max_curves]):
        ax.plot(curve.grid_days, curve.probs, color=_COLORS[i % len(_COLORS)], linewidth=1,
                label=pid, gid=f"curve-{_slug(pid)}")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("days from scan")
    ax.set_ylabel("P(alive)")
    if title:
        ax.set_title(title)
    if len(curves) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def saliency_plot(heat, background, path, title=""):
    """Saliency heat map over a grayscale background channel."""
    fig = Figure(figsize=(6.4, 5))
    ax = fig.add_subplot()
    bg = np.asarray(background, dtype=np.float64)
    span = bg.max() - bg.min()
    ax.imshow((bg - bg.min()) / span if span > 0 else np.zeros_like(bg), cmap="gray", origin="upper")
    ax.imshow(np.asarray(heat), cmap="inferno", alpha=0.5, vmin=0.0, vmax=1.0, origin="upper")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def write_pgm(path, image) -> Path:
    """Binary 8-bit PGM of an image scaled from [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
