"""Vessel masks and capillary instances.

Masks come either from a multiscale Hessian vesselness filter or from an
external file (e.g. the output of a trained segmentation network).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .imaging import InvalidInputError, check_gray, check_mask, read_mask

NATIVE_SHAPE = (768, 1024)
_EIGHT = np.ones((3, 3), dtype=bool)

KEPT = "kept"
EXCLUDED = "excluded"
AREA_OUT_OF_RANGE = "AreaOutOfRange"
BLURRED = "Blurred"
OUTSIDE_COUNTING_AREA = "OutsideCountingArea"
UNMATCHED = "Unmatched"


@dataclass(frozen=True)
class VesselnessBackend:
    scales: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0)
    beta: float = 0.5
    c: float = 0.1
    threshold: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or min(self.scales) <= 0:
            raise InvalidInputError("vesselness scales must be a non-empty list of positive sigmas")
        if not 0 < self.threshold < 1:
            raise InvalidInputError("vesselness threshold must lie in (0, 1)")
        if self.beta <= 0 or self.c <= 0:
            raise InvalidInputError("beta and c must be > 0")


@dataclass(frozen=True)
class ExternalMask:
    path: str

    def load(self, shape: tuple[int, int]) -> np.ndarray:
        mask = read_mask(self.path)
        if mask.shape != tuple(shape):
            raise InvalidInputError(
                f"mask {Path(self.path).name} is {mask.shape[1]}x{mask.shape[0]} "
                f"but the image is {shape[1]}x{shape[0]}")
        return mask


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    @classmethod
    def full(cls, shape) -> "Rect":
        return cls(0, 0, shape[0], shape[1])

    @classmethod
    def central_band(cls, shape, fraction: float = 0.8) -> "Rect":
        h, w = shape
        margin = int(round(h * (1.0 - fraction) / 2.0))
        return cls(margin, 0, h - margin, w)

    @property
    def width(self) -> int:
        return self.right - self.left

    def contains(self, r, c) -> bool:
        return self.top <= r < self.bottom and self.left <= c < self.right

    def within(self, shape) -> bool:
        return 0 <= self.top < self.bottom <= shape[0] and 0 <= self.left < self.right <= shape[1]


# --- vesselness ------------------------------------------------------------------

def hessian_eigenvalues(img: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale-normalised Hessian eigenvalues ordered so that ``|l1| <= |l2|``."""
    hrr = ndi.gaussian_filter(img, sigma, order=(2, 0), mode="nearest")
    hcc = ndi.gaussian_filter(img, sigma, order=(0, 2), mode="nearest")
    hrc = ndi.gaussian_filter(img, sigma, order=(1, 1), mode="nearest")
    return sorted_eigenvalues(hrr * sigma**2, hrc * sigma**2, hcc * sigma**2)


def sorted_eigenvalues(hrr, hrc, hcc):
    half_tr = (hrr + hcc) / 2.0
    disc = np.sqrt(((hrr - hcc) / 2.0) ** 2 + hrc**2)
    a, b = half_tr + disc, half_tr - disc
    swap = np.abs(a) < np.abs(b)
    return np.where(swap, a, b), np.where(swap, b, a)


def ridge_response(l1: np.ndarray, l2: np.ndarray, beta: float, c: float) -> np.ndarray:
    """Frangi-type response for dark ridges (``l2 > 0``); zero elsewhere."""
    out = np.zeros_like(l2)
    ok = l2 > 0
    rb = l1[ok] / l2[ok]
    s2 = l1[ok] ** 2 + l2[ok] ** 2
    out[ok] = np.exp(-rb**2 / (2 * beta**2)) * (1.0 - np.exp(-s2 / (2 * c**2)))
    return out


def vesselness(img: np.ndarray, params: VesselnessBackend = VesselnessBackend()) -> np.ndarray:
    """Max over scales of the dark-ridge response, in [0, 1]."""
    img = check_gray(img)
    per_scale = [ridge_response(*hessian_eigenvalues(img, s), params.beta, params.c) for s in params.scales]
    return np.clip(np.max(per_scale, axis=0), 0.0, 1.0)


def segment(img: np.ndarray, backend: VesselnessBackend | ExternalMask = VesselnessBackend()) -> np.ndarray:
    img = check_gray(img)
    if isinstance(backend, ExternalMask):
        return backend.load(img.shape)
    mask = vesselness(img, backend) >= backend.threshold
    mask = ndi.binary_opening(mask, structure=_EIGHT)
    return ndi.binary_closing(mask, structure=_EIGHT, border_value=0)


# --- instances -------------------------------------------------------------------

@dataclass
class CapillaryInstance:
    id: int
    pixels: np.ndarray  # (N, 2) rows/cols
    bbox: tuple[int, int, int, int]  # min row, min col, max row, max col (inclusive)
    clarity_score: float = 0.0
    status: str = KEPT
    reason: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def area(self) -> int:
        return len(self.pixels)

    @property
    def kept(self) -> bool:
        return self.status == KEPT

    def exclude(self, reason: str) -> None:
        # the first reason sticks
        if self.status == KEPT:
            self.status, self.reason = EXCLUDED, reason

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.pixels[:, 0], self.pixels[:, 1]] = True
        return out


def default_area_gates(shape, min_area: float = 80, max_area: float = 20000) -> tuple[float, float]:
    """Area gates tuned at 1024x768, scaled linearly with image area."""
    scale = (shape[0] * shape[1]) / (NATIVE_SHAPE[0] * NATIVE_SHAPE[1])
    return min_area * scale, max_area * scale


def extract_instances(mask: np.ndarray, min_area: float, max_area: float) -> list[CapillaryInstance]:
    """8-connected components, ordered by bounding-box (min row, min col)."""
    if not 0 < min_area < max_area:
        raise InvalidInputError("need 0 < min_area < max_area")
    mask = check_mask(mask)
    labels, n = ndi.label(mask, structure=_EIGHT)
    comps = []
    for k, sl in enumerate(ndi.find_objects(labels)):
        rr, cc = np.nonzero(labels[sl] == k + 1)
        pix = np.stack([rr + sl[0].start, cc + sl[1].start], axis=1)
        bbox = (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)
        comps.append((bbox[:2], pix, bbox))
    comps.sort(key=lambda t: t[0])
    out = []
    for i, (_, pix, bbox) in enumerate(comps):
        inst = CapillaryInstance(i, pix, bbox)
        if not min_area <= inst.area <= max_area:
            inst.exclude(AREA_OUT_OF_RANGE)
        out.append(inst)
    return out


def clarity_score(img: np.ndarray, pixels: np.ndarray) -> float:
    """RMS central-difference gradient magnitude over the given pixels."""
    gr, gc = np.gradient(np.asarray(img, dtype=np.float64))
    g2 = gr[pixels[:, 0], pixels[:, 1]] ** 2 + gc[pixels[:, 0], pixels[:, 1]] ** 2
    return float(np.sqrt(g2.mean())) if len(g2) else 0.0


def clarity_filter(instances: list[CapillaryInstance], img: np.ndarray, min_contrast: float = 0.02,
                   roi: Rect | None = None) -> list[CapillaryInstance]:
    img = check_gray(img)
    roi = roi or Rect.full(img.shape)
    if not roi.within(img.shape):
        raise InvalidInputError(f"counting region {roi} lies outside the {img.shape[1]}x{img.shape[0]} image")
    gr, gc = np.gradient(img)
    mag2 = gr**2 + gc**2
    for inst in instances:
        p = inst.pixels
        inst.clarity_score = float(np.sqrt(mag2[p[:, 0], p[:, 1]].mean()))
        if inst.clarity_score < min_contrast:
            inst.exclude(BLURRED)
        r0, c0, r1, c1 = inst.bbox
        if r1 < roi.top or r0 >= roi.bottom or c1 < roi.left or c0 >= roi.right:
            inst.exclude(OUTSIDE_COUNTING_AREA)
    return instances
