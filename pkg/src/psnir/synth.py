"""Synthetic photometric-stereo scenes with exact ground-truth normals.

Coordinates: x to the right, y up, z towards the orthographic camera. Image row
``i`` increases downwards, so pixel (i, j) sits at ``y = -(i + 0.5) + H/2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ImageStack, LightingSet, NormalMap, ObjectMask, Scene, SceneError

VIEW = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Material:
    """Diffuse albedo plus a mirror-direction power lobe.

    ``albedo`` is a scalar, a per-channel sequence, an (H, W) map or a
    (C, H, W) map.
    """

    albedo: object = 1.0
    specular: float = 0.0
    shininess: float = 1.0

    def albedo_map(self, shape, channels):
        a = np.asarray(self.albedo, dtype=np.float64)
        H, W = shape
        if a.ndim == 0:
            return np.full((channels, H, W), float(a))
        if a.ndim == 1:
            if a.shape[0] != channels:
                raise SceneError(f"albedo has {a.shape[0]} channels, expected {channels}")
            return np.broadcast_to(a[:, None, None], (channels, H, W)).copy()
        if a.ndim == 2:
            return np.broadcast_to(a, (channels, H, W)).copy()
        return a.copy()


def random_lights(M, seed=0, max_polar_deg=60.0, min_polar_deg=0.0, intensities=None):
    """``M`` directions uniform on the spherical cap around the view axis."""
    rng = np.random.default_rng(seed)
    cmin, cmax = np.cos(np.radians(max_polar_deg)), np.cos(np.radians(min_polar_deg))
    z = rng.uniform(cmin, cmax, M)
    phi = rng.uniform(0.0, 2 * np.pi, M)
    r = np.sqrt(1 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return LightingSet(dirs / np.linalg.norm(dirs, axis=1, keepdims=True), intensities)


def shade(normals, lights, material, channels, shadow=None, view=VIEW):
    """Render (M, C, H, W) images for unit ``normals`` of shape (3, H, W).

    I = s * (albedo + k_s * max(v.r, 0)^shininess) * max(l^T n, 0) with the
    mirror direction r = 2 (l.n) n - l.
    """
    _, H, W = normals.shape
    albedo = material.albedo_map((H, W), channels)
    dirs = lights.directions
    L = lights.combined(channels)  # (M, C, 3)
    cos = np.einsum("mk,khw->mhw", dirs, normals)  # l_hat . n
    vn = np.einsum("k,khw->hw", view, normals)
    spec_cos = 2 * cos * vn[None] - (dirs @ view)[:, None, None]
    lobe = material.specular * np.maximum(spec_cos, 0.0) ** material.shininess
    rho = albedo[None] + lobe[:, None]
    shading = np.maximum(np.einsum("mck,khw->mchw", L, normals), 0.0)
    images = rho * shading
    if shadow is not None:
        images = images * shadow[:, None]
    return images


def _add_noise(images, noise, rng):
    if noise <= 0:
        return images
    return np.maximum(images + rng.normal(0.0, noise, images.shape), 0.0)


def sphere_normals(resolution, radius_fraction=0.9, max_tilt_deg=None):
    """Ground-truth normals and disk mask of an orthographic sphere.

    ``max_tilt_deg`` optionally shrinks the mask to normals within that angle
    of the view axis.
    """
    H = W = int(resolution)
    r = radius_fraction * resolution / 2.0
    if r < 1.0 or radius_fraction > 1.0 or radius_fraction <= 0:
        raise SceneError(f"degenerate sphere radius fraction {radius_fraction}")
    x = np.arange(W) + 0.5 - W / 2.0
    y = -(np.arange(H) + 0.5 - H / 2.0)
    X, Y = np.meshgrid(x, y)
    rho2 = X * X + Y * Y
    mask = rho2 < r * r
    Z = np.sqrt(np.maximum(r * r - rho2, 0.0))
    n = np.stack([X, Y, Z]) / r
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    if max_tilt_deg is not None:
        mask &= n[2] >= np.cos(np.radians(max_tilt_deg))
    n[:, ~mask] = np.array([0.0, 0.0, 1.0])[:, None]
    return n, mask


def make_sphere_scene(radius_fraction=0.9, resolution=64, lights=None, material=None,
                      seed=0, noise=0.0, channels=1, max_tilt_deg=None, name="sphere"):
    """Render a sphere; returns a :class:`Scene` (unpacks as stack, lights, mask, truth)."""
    lights = lights if lights is not None else random_lights(10, seed)
    material = material or Material()
    n, mask = sphere_normals(resolution, radius_fraction, max_tilt_deg)
    images = shade(n, lights, material, channels)
    images = _add_noise(images, noise, np.random.default_rng(seed))
    images = images * mask
    return Scene(ImageStack(images), lights, ObjectMask(mask), NormalMap(n), name)


def evaluate_height(expression, shape):
    """Evaluate a height field given as an array, a callable ``f(x, y)`` or a
    numpy expression string in ``x`` and ``y`` (pixel units, y up)."""
    H, W = shape
    if not callable(expression) and not isinstance(expression, str):
        z = np.asarray(expression, dtype=np.float64)
        if z.shape != (H, W):
            raise SceneError(f"height grid {z.shape} does not match {shape}")
        return z
    x = np.arange(W, dtype=np.float64)
    y = -np.arange(H, dtype=np.float64)
    X, Y = np.meshgrid(x, y)
    if isinstance(expression, str):
        names = {k: getattr(np, k) for k in ("sin", "cos", "exp", "sqrt", "abs", "tanh",
                                             "minimum", "maximum", "where", "pi", "log")}
        z = eval(expression, {"__builtins__": {}}, dict(names, x=X, y=Y, H=H, W=W))
    else:
        z = expression(X, Y)
    return np.broadcast_to(np.asarray(z, dtype=np.float64), (H, W)).copy()


def heightfield_normals(z):
    dz_drow, dz_dx = np.gradient(z)
    dz_dy = -dz_drow
    n = np.stack([-dz_dx, -dz_dy, np.ones_like(z)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def _bilinear(z, rows, cols):
    H, W = z.shape
    r0 = np.clip(np.floor(rows).astype(int), 0, H - 2) if H > 1 else np.zeros_like(rows, int)
    c0 = np.clip(np.floor(cols).astype(int), 0, W - 2) if W > 1 else np.zeros_like(cols, int)
    fr = np.clip(rows - r0, 0.0, 1.0)
    fc = np.clip(cols - c0, 0.0, 1.0)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    top = z[r0, c0] * (1 - fc) + z[r0, c1] * fc
    bot = z[r1, c0] * (1 - fc) + z[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def cast_shadows(z, direction, step=0.25, bias=1e-6):
    """Binary visibility (1 lit, 0 occluded) of each pixel towards ``direction``.

    Marches from every pixel centre along the light ray in horizontal steps of
    ``step`` pixels, sampling the bilinearly interpolated height field.
    """
    lx, ly, lz = direction
    H, W = z.shape
    horiz = np.hypot(lx, ly)
    lit = np.ones((H, W), dtype=bool)
    if horiz < 1e-12:
        return lit.astype(np.float64)
    dcol, drow = lx / horiz, -ly / horiz
    rise = lz / horiz  # height gained per unit horizontal distance
    rows0, cols0 = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                               indexing="ij")
    zmax = z.max()
    active = np.ones((H, W), dtype=bool)
    d = step
    while active.any():
        rows = rows0 + drow * d
        cols = cols0 + dcol * d
        ray = z + rise * d
        inside = (rows >= 0) & (rows <= H - 1) & (cols >= 0) & (cols <= W - 1) & (ray <= zmax)
        active &= inside
        if not active.any():
            break
        ground = _bilinear(z, np.where(active, rows, 0.0), np.where(active, cols, 0.0))
        hit = active & (ground > ray + bias)
        lit &= ~hit
        active &= ~hit
        d += step
    return lit.astype(np.float64)


def make_heightfield_scene(expression, resolution=64, lights=None, material=None, seed=0,
                           noise=0.0, channels=1, shadows=True, mask=None, name="heightfield"):
    """Render a height field ``z(x, y)``; cast shadows by ray marching when
    ``shadows`` is set."""
    res = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    lights = lights if lights is not None else random_lights(10, seed)
    material = material or Material()
    z = evaluate_height(expression, res)
    n = heightfield_normals(z)
    shadow = None
    if shadows:
        shadow = np.stack([cast_shadows(z, d) for d in lights.directions])
    images = shade(n, lights, material, channels, shadow)
    images = _add_noise(images, noise, np.random.default_rng(seed))
    m = np.ones(res, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    images = images * m
    return Scene(ImageStack(images), lights, ObjectMask(m), NormalMap(n), name)
