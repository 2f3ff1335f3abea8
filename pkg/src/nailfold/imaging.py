"""Raster primitives shared by every pipeline stage.

Images are plain 2D ``numpy`` arrays: ``float64`` in [0, 1] for grayscale
images and ``bool`` for masks (True = vessel). Coordinates are (row, col).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
MASK_THRESHOLD = 128


class InvalidInputError(ValueError):
    """Raised for malformed rasters, files or parameters."""


@dataclass(frozen=True)
class ScaleConfig:
    """Physical calibration. Without ``microns_per_pixel`` outputs stay in pixels."""

    microns_per_pixel: float | None = None
    fps: float = 20.0

    def __post_init__(self):
        if self.microns_per_pixel is not None and not self.microns_per_pixel > 0:
            raise InvalidInputError("microns_per_pixel must be > 0")
        if not self.fps > 0:
            raise InvalidInputError("fps must be > 0")


def check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InvalidInputError(f"expected a non-empty 2D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise InvalidInputError("gray image values must lie in [0, 1]")
    return img


def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInputError(f"expected a 2D mask, got shape {mask.shape}")
    return mask.astype(bool)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an 8-bit RGB raster, scaled to [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise InvalidInputError(f"expected an HxWx3 raster, got shape {rgb.shape}")
    rgb = rgb.astype(np.float64)
    if rgb.min() < 0 or rgb.max() > 255:
        raise InvalidInputError("channel values must lie in [0, 255]")
    wr, wg, wb = LUMA_WEIGHTS
    gray = (wr * rgb[..., 0] + wg * rgb[..., 1] + wb * rgb[..., 2]) / 255.0
    return np.clip(gray, 0.0, 1.0)


def standardize(img: np.ndarray, p_low: float = 1.0, p_high: float = 99.0) -> tuple[np.ndarray, bool]:
    """Percentile-clipped min-max rescale.

    Returns ``(image, degenerate)``; a constant image maps to all 0.5 with
    ``degenerate=True``.
    """
    img = check_gray(img)
    if not 0 <= p_low < p_high <= 100:
        raise InvalidInputError(f"need 0 <= p_low < p_high <= 100, got {p_low}, {p_high}")
    lo, hi = np.percentile(img, [p_low, p_high])
    if hi <= lo:
        return np.full_like(img, 0.5), True
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0), False


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background pixel.

    Pixels outside the image count as background, so an all-foreground mask
    yields distances to the border.
    """
    mask = check_mask(mask)
    padded = np.pad(mask, 1, constant_values=False)
    return ndi.distance_transform_edt(padded)[1:-1, 1:-1]


def bilinear_sample(field: np.ndarray, rows, cols) -> np.ndarray:
    """Bilinear interpolation at fractional (row, col); out-of-range coordinates clamp to the edge."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    return ndi.map_coordinates(np.asarray(field, dtype=np.float64), [rows, cols], order=1, mode="nearest")


def shift_image(img: np.ndarray, dr: float, dc: float) -> np.ndarray:
    """Bilinear translation: ``out[r, c] = img[r - dr, c - dc]`` with edge clamping."""
    if dr == 0 and dc == 0:
        return np.array(img, dtype=np.float64, copy=True)
    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(img, rr - dr, cc - dc)


# --- file I/O -------------------------------------------------------------------

def _load_raster(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                raise InvalidInputError(f"{path}: only 8-bit rasters are supported")
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB") if im.mode in ("RGBA", "P", "CMYK") else im.convert("L")
            return np.asarray(im)
    except OSError as exc:
        raise InvalidInputError(f"cannot decode {path}: {exc}") from exc


def read_gray(path) -> np.ndarray:
    """Load an 8-bit gray or RGB PNG/PGM/PPM as a [0, 1] gray image."""
    arr = _load_raster(path)
    if arr.ndim == 3:
        return to_grayscale(arr)
    return arr.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    """Load a mask file; values >= 128 are vessel."""
    arr = _load_raster(path)
    if arr.ndim == 3:
        arr = np.rint(to_grayscale(arr) * 255.0)
    return arr >= MASK_THRESHOLD


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path, img: np.ndarray) -> None:
    """Write a [0, 1] image as 8-bit; format from suffix (.png, .pgm)."""
    Image.fromarray(to_uint8(img)).save(Path(path))


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(check_mask(mask), 255, 0).astype(np.uint8)).save(Path(path))
