"""Angular-error metrics and benchmark tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import SceneError


def _arrays(N_est, N_true, mask):
    a = np.asarray(getattr(N_est, "normals", N_est), dtype=np.float64)
    b = np.asarray(getattr(N_true, "normals", N_true), dtype=np.float64)
    m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    if m.ndim == 3:
        m = m[0]
    if a.shape != b.shape or a.shape[1:] != m.shape:
        raise SceneError(f"shape mismatch: {a.shape} vs {b.shape} with mask {m.shape}")
    if not m.any():
        raise SceneError("mask is empty")
    return a, b, m


def error_map(N_est, N_true, mask):
    """Per-pixel angle in degrees between two (3, H, W) normal maps; 0 off-mask."""
    a, b, m = _arrays(N_est, N_true, mask)
    # atan2 of |a x b| and a . b equals arccos(a . b) for unit vectors but
    # stays accurate near 0 and 180 degrees and for float32-stored maps
    dot = (a * b).sum(axis=0)
    cross = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    return np.where(m, np.degrees(np.arctan2(cross, dot)), 0.0)


def mean_angular_error(N_est, N_true, mask):
    """Mean over masked pixels of arccos(n . n*), in degrees."""
    _, _, m = _arrays(N_est, N_true, mask)
    return float(error_map(N_est, N_true, mask)[m].mean())


@dataclass
class EvalReport:
    mean: float
    median: float
    p90: float
    error_map: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def to_text(self):
        lines = [f"mean_angular_error {self.mean:.6f}",
                 f"median_angular_error {self.median:.6f}",
                 f"p90_angular_error {self.p90:.6f}"]
        lines += [f"{k} {v}" for k, v in self.meta.items()]
        return "\n".join(lines) + "\n"


def evaluate(N_est, N_true, mask, **meta):
    emap = error_map(N_est, N_true, mask)
    _, _, m = _arrays(N_est, N_true, mask)
    vals = emap[m]
    return EvalReport(float(vals.mean()), float(np.median(vals)), float(np.percentile(vals, 90)),
                      emap, dict(meta))


def colorize_error(emap, vmax=90.0):
    """Jet-like RGB uint8 rendering of an error map (0 -> blue, vmax -> red)."""
    t = np.clip(np.asarray(emap) / vmax, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def summarize_benchmark(rows):
    """Table of per-scene mean errors plus an average row.

    ``rows`` is a list of ``(scene_name, EvalReport or float)``. Returns
    ``(text_table, key_value_text, average)``.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("need at least one scene")
    scores = [(name, r.mean if isinstance(r, EvalReport) else float(r)) for name, r in rows]
    avg = float(np.mean([s for _, s in scores]))
    width = max(7, max(len(n) for n, _ in scores))
    table = [f"{'scene':<{width}}  mean_err"]
    table += [f"{n:<{width}}  {s:8.2f}" for n, s in scores]
    table.append(f"{'average':<{width}}  {avg:8.2f}")
    kv = [f"{n} {s!r}" for n, s in scores] + [f"average {avg!r}"]
    return "\n".join(table) + "\n", "\n".join(kv) + "\n", avg
