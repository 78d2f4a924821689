"""Scene directories, normal-map containers and result images.

A scene directory holds numbered observations ``001.png`` ... (8- or 16-bit,
grey or RGB), ``light_directions.txt`` (one ``x y z`` row per observation),
``light_intensities.txt`` (one row of C values per observation) and
``mask.png``. Ground truth is read from ``normal_gt.psnt`` or DiLiGenT's
``Normal_gt.mat`` when present.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .domain import ImageStack, LightingSet, NormalMap, ObjectMask, Scene, SceneError

log = logging.getLogger(__name__)

MAGIC = b"PSNT"
DIRECTIONS_FILE = "light_directions.txt"
INTENSITIES_FILE = "light_intensities.txt"
MASK_FILE = "mask.png"
TRUTH_FILE = "normal_gt.psnt"
DILIGENT_TRUTH_FILE = "Normal_gt.mat"

_IMAGE_RE = re.compile(r"^(\d+)\.png$", re.IGNORECASE)


class LayoutError(SceneError):
    """Scene directory does not follow the expected layout."""


class LightCountMismatch(LayoutError):
    pass


class ImageSizeMismatch(LayoutError):
    pass


class MissingMask(LayoutError):
    pass


@dataclass(frozen=True)
class LoadOptions:
    downsample: int = 1
    grayscale: bool = False
    # divide each image by its light intensity and use unit intensities instead
    divide_intensities: bool = False


# ---------------------------------------------------------------------------
# float container


def save_tensor(arr, path):
    """Write ``arr`` as magic, ndim, dims (uint32 LE) and float32 LE data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise LayoutError(f"{path}: not a tensor container")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise LayoutError(f"{path}: truncated container")
    return data.reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# images


def read_image(path):
    """Decode to float (C, H, W) in [0, 1]; 16-bit / 65535, 8-bit / 255."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise LayoutError(f"cannot read image {path}")
    if img.dtype == np.uint16:
        scale = 65535.0
    elif img.dtype == np.uint8:
        scale = 255.0
    else:
        raise LayoutError(f"{path}: unsupported bit depth {img.dtype}")
    if img.ndim == 2:
        img = img[None]
    else:
        img = img[:, :, :3][:, :, ::-1].transpose(2, 0, 1)  # BGR -> RGB
    return img.astype(np.float64) / scale, img.dtype


def write_image(path, img, bits=16):
    """Write a float (C, H, W) or (H, W) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    top = 65535 if bits == 16 else 255
    q = np.floor(np.clip(img, 0.0, 1.0) * top + 0.5).astype(np.uint16 if bits == 16 else np.uint8)
    if q.ndim == 3:
        q = q.transpose(1, 2, 0)[:, :, ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")


def write_rgb8(path, rgb):
    """Write an (H, W, 3) uint8 RGB array."""
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[:, :, ::-1])):
        raise OSError(f"failed to write {path}")


def read_rgb8(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise LayoutError(f"cannot read image {path}")
    return img[:, :, ::-1]


# ---------------------------------------------------------------------------
# scenes


def _observation_files(root):
    found = []
    for p in root.iterdir():
        m = _IMAGE_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    found.sort()
    if not found:
        raise LayoutError(f"{root}: no numbered observation images")
    indices = [i for i, _ in found]
    if indices != list(range(indices[0], indices[0] + len(indices))):
        raise LayoutError(f"{root}: observation numbers are not consecutive")
    return [p for _, p in found]


def _read_rows(path, width=None):
    rows = np.loadtxt(path, ndmin=2)
    if width is not None and rows.shape[1] != width:
        raise LayoutError(f"{path}: expected {width} columns, got {rows.shape[1]}")
    return rows


def _box(arr, k):
    """Box-average the last two axes by an integer factor ``k``."""
    H, W = arr.shape[-2:]
    h, w = H // k, W // k
    arr = arr[..., :h * k, :w * k]
    return arr.reshape(arr.shape[:-2] + (h, k, w, k)).mean(axis=(-3, -1))


def _load_truth(root):
    p = root / TRUTH_FILE
    if p.exists():
        return load_tensor(p).astype(np.float64)
    p = root / DILIGENT_TRUTH_FILE
    if p.exists():
        from scipy.io import loadmat

        n = loadmat(p)["Normal_gt"]  # (H, W, 3)
        return np.asarray(n, dtype=np.float64).transpose(2, 0, 1)
    return None


def load_scene(directory, options=None):
    """Read a scene directory into a :class:`Scene`."""
    options = options or LoadOptions()
    root = Path(directory)
    files = _observation_files(root)
    dirs = _read_rows(root / DIRECTIONS_FILE, 3)
    if dirs.shape[0] != len(files):
        raise LightCountMismatch(f"{len(files)} images but {dirs.shape[0]} light directions")
    ints_path = root / INTENSITIES_FILE
    ints = _read_rows(ints_path) if ints_path.exists() else np.ones((len(files), 1))
    if ints.shape[0] != len(files):
        raise LightCountMismatch(f"{len(files)} images but {ints.shape[0]} intensity rows")

    images, depth = [], None
    for p in files:
        img, dt = read_image(p)
        if images and (img.shape != images[0].shape or dt != depth):
            raise ImageSizeMismatch(f"{p.name}: {img.shape}/{dt} differs from {images[0].shape}/{depth}")
        images.append(img)
        depth = dt
    images = np.stack(images)

    mask_path = root / MASK_FILE
    if not mask_path.exists():
        raise MissingMask(f"{root}: no {MASK_FILE}")
    mimg, _ = read_image(mask_path)
    mask = mimg.mean(axis=0) > 0.5
    if mask.shape != images.shape[2:]:
        raise ImageSizeMismatch(f"mask {mask.shape} vs images {images.shape[2:]}")
    truth = _load_truth(root)

    if options.divide_intensities:
        C = images.shape[1]
        per = ints if ints.shape[1] == C else np.repeat(ints.mean(axis=1, keepdims=True), C, axis=1)
        images = images / per[:, :, None, None]
        ints = np.ones((len(files), 1))
    if options.grayscale and images.shape[1] > 1:
        images = images.mean(axis=1, keepdims=True)
        ints = ints.mean(axis=1, keepdims=True)
    if ints.shape[1] not in (1, images.shape[1]):
        ints = ints.mean(axis=1, keepdims=True)

    k = int(options.downsample)
    if k > 1:
        images = _box(images, k)
        mask = _box(mask.astype(np.float64), k) > 0.5
        if truth is not None:
            truth = _box(truth, k)
            norm = np.linalg.norm(truth, axis=0, keepdims=True)
            truth = np.where(norm > 0, truth / np.where(norm > 0, norm, 1), 0.0)

    lights = LightingSet.from_vectors(dirs, ints)
    return Scene(ImageStack(images), lights, ObjectMask(mask),
                 None if truth is None else NormalMap(truth), root.name)


def save_scene(scene, directory, bits=16):
    """Write a scene in the layout :func:`load_scene` reads.

    Images brighter than 1 are scaled down together with the light
    intensities so that the stored scene stays consistent; the factor is
    returned.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    images = np.asarray(scene.stack.images, dtype=np.float64)
    ints = np.asarray(scene.lights.intensities, dtype=np.float64)
    peak = float(images.max())
    factor = 1.0
    if peak > 1.0:
        factor = peak
        log.info("scaling images and light intensities by 1/%.4g to fit the image range", factor)
        images = images / factor
        ints = ints / factor
    width = len(str(scene.stack.M))
    width = max(3, width)
    for i, img in enumerate(images, start=1):
        write_image(root / f"{i:0{width}d}.png", img, bits)
    np.savetxt(root / DIRECTIONS_FILE, scene.lights.directions, fmt="%.17g")
    np.savetxt(root / INTENSITIES_FILE, ints, fmt="%.17g")
    write_image(root / MASK_FILE, scene.mask.mask.astype(np.float64), bits=8)
    if scene.truth is not None:
        save_tensor(scene.truth.normals, root / TRUTH_FILE)
    return factor


# ---------------------------------------------------------------------------
# results


def encode_normals(normals, mask=None):
    """RGB uint8 visualization: round((n + 1) / 2 * 255), black background."""
    n = np.asarray(getattr(normals, "normals", normals), dtype=np.float64)
    rgb = np.floor((n + 1.0) / 2.0 * 255.0 + 0.5)
    rgb = np.clip(rgb, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if mask is not None:
        m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
        rgb[~m] = 0
    return rgb


def decode_normals(rgb):
    n = np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=0, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)


def save_normal_map(normals, mask, path):
    """Write the float container at ``path`` and a PNG visualization next to it.

    Returns ``(container_path, png_path)``.
    """
    path = Path(path)
    n = np.asarray(getattr(normals, "normals", normals))
    save_tensor(n, path)
    png = path.with_suffix(".png")
    write_rgb8(png, encode_normals(n, mask))
    return path, png


def load_normal_map(path):
    path = Path(path)
    if path.suffix.lower() == ".png":
        return NormalMap(decode_normals(read_rgb8(path)))
    if path.suffix.lower() == ".mat":
        from scipy.io import loadmat

        return NormalMap(np.asarray(loadmat(path)["Normal_gt"], dtype=np.float64).transpose(2, 0, 1))
    return NormalMap(load_tensor(path))


def load_mask(path):
    path = Path(path)
    if path.suffix.lower() == ".psnt":
        m = load_tensor(path)
        return ObjectMask(np.asarray(m).reshape(m.shape[-2:]) > 0.5)
    img, _ = read_image(path)
    return ObjectMask(img.mean(axis=0) > 0.5)


DISPLAY_SCALE = 255.0 / 2.0
ERROR_GAIN = 10.0


def display_image(img, mask=None):
    """Normalized intensities -> uint8 display values (x 255/2)."""
    v = np.clip(np.floor(np.asarray(img, dtype=np.float64) * DISPLAY_SCALE + 0.5), 0, 255).astype(np.uint8)
    if mask is not None:
        v = v * np.asarray(mask, dtype=np.uint8)
    return v


def error_image(err, mask=None):
    """min(255, 10 * |diff| * 255/2) as uint8."""
    return display_image(np.abs(err) * ERROR_GAIN, mask)


def _to_file(path, v):
    v = v[0] if v.shape[0] == 1 else v.transpose(1, 2, 0)[:, :, ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(v)):
        raise OSError(f"failed to write {path}")


def save_reconstructions(I_hat, R_hat, errors, directory, mask=None):
    """Write, per observation, the synthesized image, reflectance image and x10
    error image (``3 M`` PNG files). Inputs are (M, C, H, W) in normalized units.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    I_hat, R_hat, errors = (np.asarray(a) for a in (I_hat, R_hat, errors))
    m = None if mask is None else np.asarray(getattr(mask, "mask", mask), dtype=bool)
    written = []
    for i in range(I_hat.shape[0]):
        for prefix, v in (("synth", display_image(I_hat[i], m)),
                          ("reflectance", display_image(R_hat[i], m)),
                          ("error", error_image(errors[i], m))):
            p = root / f"{prefix}_{i + 1:03d}.png"
            _to_file(p, v)
            written.append(p)
    return written
