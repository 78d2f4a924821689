"""Scene-level value types plus cropping and intensity normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SceneError(ValueError):
    pass


def _frozen(arr, dtype=np.float64):
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageStack:
    """Observed images, shape (M, C, H, W), linear intensities."""

    images: np.ndarray

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4:
            raise SceneError(f"images must have shape (M, C, H, W), got {imgs.shape}")
        if imgs.shape[1] not in (1, 3):
            raise SceneError(f"color channels must be 1 or 3, got {imgs.shape[1]}")
        if not np.all(np.isfinite(imgs)):
            raise SceneError("images contain non-finite values")
        if np.any(imgs < 0):
            raise SceneError("images contain negative intensities")
        object.__setattr__(self, "images", _frozen(imgs, imgs.dtype if imgs.dtype.kind == "f" else np.float64))

    @property
    def M(self):
        return self.images.shape[0]

    @property
    def C(self):
        return self.images.shape[1]

    @property
    def hw(self):
        return self.images.shape[2:]


@dataclass(frozen=True)
class LightingSet:
    """Unit light directions (M, 3) and positive per-channel intensities (M, C)."""

    directions: np.ndarray
    intensities: np.ndarray = None

    def __post_init__(self):
        dirs = np.asarray(self.directions, dtype=np.float64)
        if dirs.ndim != 2 or dirs.shape[1] != 3:
            raise SceneError(f"directions must have shape (M, 3), got {dirs.shape}")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SceneError("light directions must be unit vectors")
        ints = self.intensities
        ints = np.ones((dirs.shape[0], 1)) if ints is None else np.asarray(ints, dtype=np.float64)
        if ints.ndim == 1:
            ints = ints[:, None]
        if ints.shape[0] != dirs.shape[0]:
            raise SceneError(f"{ints.shape[0]} intensity rows for {dirs.shape[0]} directions")
        if np.any(ints <= 0):
            raise SceneError("light intensities must be positive")
        object.__setattr__(self, "directions", _frozen(dirs))
        object.__setattr__(self, "intensities", _frozen(ints))

    @classmethod
    def from_vectors(cls, directions, intensities=None):
        """Build from possibly non-unit directions (re-normalized)."""
        dirs = np.asarray(directions, dtype=np.float64)
        return cls(dirs / np.linalg.norm(dirs, axis=1, keepdims=True), intensities)

    @property
    def M(self):
        return self.directions.shape[0]

    def combined(self, C):
        """Per-channel light vectors ``l_i`` as an (M, C, 3) array."""
        ints = self.intensities
        if ints.shape[1] == 1:
            ints = np.repeat(ints, C, axis=1)
        elif ints.shape[1] != C:
            if C == 1:
                ints = ints.mean(axis=1, keepdims=True)
            else:
                raise SceneError(f"lights carry {ints.shape[1]} channels, images {C}")
        return ints[:, :, None] * self.directions[:, None, :]

    def reorder(self, order):
        return LightingSet(self.directions[order], self.intensities[order])


@dataclass(frozen=True)
class ObjectMask:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim == 3:
            m = m[0]
        if m.ndim != 2:
            raise SceneError(f"mask must have shape (1, H, W) or (H, W), got {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise SceneError("mask values must be 0 or 1")
        if not m.any():
            raise SceneError("mask is empty")
        object.__setattr__(self, "mask", _frozen(m, bool))

    @property
    def area(self):
        return int(self.mask.sum())

    @property
    def hw(self):
        return self.mask.shape


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel normals, shape (3, H, W)."""

    normals: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normals)
        if n.ndim == 4 and n.shape[0] == 1:
            n = n[0]
        if n.ndim != 3 or n.shape[0] != 3:
            raise SceneError(f"normals must have shape (3, H, W), got {n.shape}")
        object.__setattr__(self, "normals", _frozen(n, n.dtype if n.dtype.kind == "f" else np.float64))

    def check_unit(self, mask, tol=1e-4):
        norms = np.linalg.norm(self.normals, axis=0)[mask.mask]
        return bool(np.all(np.abs(norms - 1.0) <= tol))


@dataclass(frozen=True)
class ViewConfig:
    direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=np.float64)
        if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise SceneError("view direction must be a unit 3-vector")

    @property
    def vector(self):
        return np.asarray(self.direction, dtype=np.float64)


@dataclass(frozen=True)
class Crop:
    """Placement of a cropped window inside the original frame."""

    offset: tuple
    size: tuple
    full_size: tuple = field(default=None)

    def embed(self, arr, fill=0.0):
        """Place a (..., h, w) array back into the full frame."""
        arr = np.asarray(arr)
        out = np.full(arr.shape[:-2] + tuple(self.full_size), fill, dtype=arr.dtype)
        y, x = self.offset
        h, w = self.size
        out[..., y:y + h, x:x + w] = arr
        return out

    def apply(self, arr):
        y, x = self.offset
        h, w = self.size
        return np.asarray(arr)[..., y:y + h, x:x + w]


def crop_to_bbox(stack, mask, margin=4):
    """Crop stack and mask to the mask's bounding box grown by ``margin``.

    Returns ``(stack, mask, crop)``; ``crop.offset`` is the (row, col) of the
    window's top-left corner in the original frame.
    """
    m = mask.mask
    if not m.any():
        raise SceneError("mask is empty")
    H, W = m.shape
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    y0 = max(int(rows[0]) - margin, 0)
    y1 = min(int(rows[-1]) + margin + 1, H)
    x0 = max(int(cols[0]) - margin, 0)
    x1 = min(int(cols[-1]) + margin + 1, W)
    crop = Crop(offset=(y0, x0), size=(y1 - y0, x1 - x0), full_size=(H, W))
    return ImageStack(crop.apply(stack.images)), ObjectMask(crop.apply(m)), crop


def normalize_intensity(stack, mask):
    """Scale images by 1/(2*sigma), sigma = RMS intensity over masked pixels.

    Returns ``(normalized_stack, sigma)``.
    """
    imgs = stack.images
    if mask.area < 1:
        raise SceneError("mask is empty")
    sel = imgs[:, :, mask.mask]
    sigma = float(np.sqrt(np.mean(np.square(sel, dtype=np.float64))))
    if sigma == 0.0:
        raise SceneError("masked intensities are all zero")
    return ImageStack(imgs / (2.0 * sigma)), sigma


@dataclass(frozen=True)
class Scene:
    stack: ImageStack
    lights: LightingSet
    mask: ObjectMask
    truth: NormalMap | None = None
    name: str = ""

    def __post_init__(self):
        if self.lights.M != self.stack.M:
            raise SceneError(f"{self.lights.M} lights for {self.stack.M} images")
        if self.mask.hw != self.stack.hw:
            raise SceneError(f"mask size {self.mask.hw} differs from image size {self.stack.hw}")

    def __iter__(self):
        return iter((self.stack, self.lights, self.mask, self.truth))
