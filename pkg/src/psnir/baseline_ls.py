"""Lambertian least-squares photometric stereo."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .domain import NormalMap, SceneError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LsOptions:
    threshold: float | None = None

    def __post_init__(self):
        if self.threshold is not None and self.threshold < 0:
            raise SceneError("threshold must be non-negative")


@dataclass(frozen=True)
class LsResult:
    normals: NormalMap
    albedo: np.ndarray
    dark: np.ndarray


def _light_matrix(lights, C):
    # luminance collapse: mean over channels of the per-channel light vectors
    return lights.combined(C).mean(axis=1)


def _solve(L, I):
    """Normal-equation solve of L n = I for a batch of columns of I."""
    gram = L.T @ L
    return np.linalg.solve(gram, L.T @ I)


def solve_least_squares(stack, lights, mask, opts=None):
    """Per-pixel n = pinv(L) I, normalized; returns an :class:`LsResult`.

    Colour stacks are collapsed to luminance. Pixels outside the mask, or dark
    in every observation, get normal (0, 0, 1) and albedo 0.
    """
    opts = opts or LsOptions()
    imgs = np.asarray(stack.images, dtype=np.float64)
    M, C, H, W = imgs.shape
    if M < 3:
        raise SceneError(f"need at least 3 observations, got {M}")
    if lights.M != M:
        raise SceneError(f"{lights.M} lights for {M} images")
    L = _light_matrix(lights, C)
    if np.linalg.matrix_rank(L) < 3:
        raise SceneError("light matrix has rank < 3")
    cond = np.linalg.cond(L.T @ L)
    if cond > 1e8:
        log.warning("ill-conditioned light matrix (cond=%.3g)", cond)

    lum = imgs.mean(axis=1)  # (M, H, W)
    m = mask.mask
    I = lum[:, m]  # (M, P)
    G = _solve(L, I)

    if opts.threshold is not None:
        keep = I > opts.threshold
        counts = keep.sum(axis=0)
        for p in np.flatnonzero((counts >= 3) & (counts < M)):
            sel = keep[:, p]
            Ls = L[sel]
            if np.linalg.matrix_rank(Ls) < 3:
                continue
            G[:, p] = _solve(Ls, I[sel, p])

    albedo_p = np.linalg.norm(G, axis=0)
    dark_p = ~np.any(I > 0, axis=0) | (albedo_p == 0)
    safe = np.where(dark_p, 1.0, albedo_p)
    n_p = G / safe
    n_p[:, dark_p] = np.array([[0.0], [0.0], [1.0]])
    albedo_p = np.where(dark_p, 0.0, albedo_p)

    normals = np.zeros((3, H, W))
    normals[2] = 1.0
    normals[:, m] = n_p
    albedo = np.zeros((H, W))
    albedo[m] = albedo_p
    dark = np.zeros((H, W), dtype=bool)
    dark[m] = dark_p
    if dark_p.any():
        log.info("%d masked pixels are dark in every observation", int(dark_p.sum()))
    return LsResult(NormalMap(normals), albedo, dark)


def prior_normals(stack, lights, mask):
    """Unthresholded least-squares normals, used as the weak-supervision prior."""
    return solve_least_squares(stack, lights, mask, LsOptions()).normals
