"""WBC flow from capillary videos.

Stabilize against frame 0, sample a spatio-temporal profile along the
capillary path, remove the static vessel, then read bright streaks off a
pixel-driven Radon transform. A streak of slope ds/dt = v becomes a peak at
theta with v = -cot(theta).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage as ndi

from .capillary import cumulative_arc, smooth_points
from .imaging import InvalidInputError, ScaleConfig, bilinear_sample, check_gray, read_gray, shift_image
from .skeleton import CapillaryPath

log = logging.getLogger(__name__)

PATCH = 15
MIN_MATCHES = 8
MIN_ZNCC = 0.5
REFINE_RADIUS = 3
EXACT_TOL = 2e-5
MIN_DISTINCT = 0.1
LOW_CONFIDENCE = "LowConfidence"
STATIONARY = "Stationary"
DEFAULT_FPS = 20.0


# --- frame sequences -------------------------------------------------------------

@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, H, W) float64 in [0, 1]
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise InvalidInputError("a frame sequence needs >= 2 frames of equal size")
        if not self.fps > 0:
            raise InvalidInputError("fps must be > 0")
        for f in self.frames[:1]:
            check_gray(f)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def _read_meta(path: Path, required: tuple[str, ...]) -> dict:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(meta, dict):
        raise InvalidInputError(f"{path}: expected a JSON object")
    missing = [k for k in required if k not in meta]
    if missing:
        raise InvalidInputError(f"{path}: missing field {missing[0]!r}")
    return meta


def read_frames_dir(directory, warnings: list[str] | None = None) -> FrameSequence:
    """Numbered ``frame_*.png``/``.pgm`` files plus an optional ``meta.json`` holding ``{"fps": F}``."""
    warnings = [] if warnings is None else warnings
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"no such frame directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.name.startswith("frame_") and p.suffix.lower() in (".png", ".pgm"))
    if len(files) < 2:
        raise InvalidInputError(f"{directory}: need at least two frame_NNNNNN.png files")
    frames = [read_gray(p) for p in files]
    if len({f.shape for f in frames}) != 1:
        raise InvalidInputError(f"{directory}: frames differ in size")
    meta_path = directory / "meta.json"
    meta = _read_meta(meta_path, ()) if meta_path.is_file() else {}
    if "fps" not in meta:
        warnings.append(f"{directory}: no fps in meta.json; assuming {DEFAULT_FPS:g}")
    return FrameSequence(np.stack(frames), float(meta.get("fps", DEFAULT_FPS)))


def read_raw_video(path, meta_path=None) -> FrameSequence:
    """Planar 8-bit frames with a JSON sidecar ``{"width", "height", "frames", "fps"}``."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path is not None else path.with_suffix(".json")
    if not path.is_file():
        raise InvalidInputError(f"no such raw video: {path}")
    if not meta_path.is_file():
        raise InvalidInputError(f"raw video needs a metadata file: {meta_path}")
    meta = _read_meta(meta_path, ("width", "height", "frames", "fps"))
    w, h, t = int(meta["width"]), int(meta["height"]), int(meta["frames"])
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != w * h * t:
        raise InvalidInputError(f"{path}: {data.size} bytes, expected {w}x{h}x{t} = {w * h * t}")
    return FrameSequence(data.reshape(t, h, w).astype(np.float64) / 255.0, float(meta["fps"]))


def read_video(path, warnings: list[str] | None = None) -> FrameSequence:
    path = Path(path)
    return read_frames_dir(path, warnings) if path.is_dir() else read_raw_video(path)


# --- stabilization ---------------------------------------------------------------

def harris_corners(img: np.ndarray, n: int, margin: int, sigma: float = 1.5, k: float = 0.04,
                   min_distance: int = 7) -> np.ndarray:
    """Top-``n`` Harris corners as (row, col) ints, at least ``margin`` px from the border."""
    gr = ndi.sobel(img, axis=0)
    gc = ndi.sobel(img, axis=1)
    arr = ndi.gaussian_filter(gr * gr, sigma)
    acc = ndi.gaussian_filter(gc * gc, sigma)
    arc = ndi.gaussian_filter(gr * gc, sigma)
    resp = arr * acc - arc**2 - k * (arr + acc) ** 2
    peak = (resp == ndi.maximum_filter(resp, size=2 * min_distance + 1)) & (resp > 0)
    h, w = img.shape
    peak[:margin] = peak[h - margin:] = False
    peak[:, :margin] = peak[:, w - margin:] = False
    rr, cc = np.nonzero(peak)
    order = np.lexsort((cc, rr, -resp[rr, cc]))[:n]
    return np.stack([rr[order], cc[order]], axis=1)


def _parabolic(m1: float, m0: float, p1: float) -> float:
    denom = m1 - 2.0 * m0 + p1
    return 0.0 if denom >= 0 else float(np.clip(0.5 * (m1 - p1) / denom, -0.5, 0.5))


def corner_scores(ref: np.ndarray, frame: np.ndarray, corner, radius: int) -> np.ndarray | None:
    """ZNCC of a 15x15 reference patch at every shift within +-radius; None for a flat patch."""
    half = PATCH // 2
    r, c = int(corner[0]), int(corner[1])
    tmpl = ref[r - half:r + half + 1, c - half:c + half + 1].astype(np.float32)
    if tmpl.std() < 1e-6:
        return None
    win = frame[r - half - radius:r + half + radius + 1, c - half - radius:c + half + radius + 1].astype(np.float32)
    return cv2.matchTemplate(win, tmpl, cv2.TM_CCOEFF_NORMED).astype(np.float64)


def _distinct(sc: np.ndarray, i: int, j: int) -> bool:
    """Peak clears every score more than 2 px away by MIN_DISTINCT (rejects edges sliding along themselves)."""
    away = sc.copy()
    away[max(i - 2, 0):i + 3, max(j - 2, 0):j + 3] = -np.inf
    return not np.isfinite(away).any() or sc[i, j] - away.max() >= MIN_DISTINCT


def estimate_shift(surfaces: list[np.ndarray], radius: int) -> tuple[float, float] | None:
    """Median integer peak over the corners, refined by a parabola through their mean score surface.

    Corners whose best score is weak, not distinct, or on the search border
    do not count as matches, nor do peaks more than 1 px from the median; None
    when fewer than MIN_MATCHES remain.
    """
    peaks, kept = [], []
    for sc in surfaces:
        i, j = np.unravel_index(int(np.argmax(sc)), sc.shape)
        if sc[i, j] < MIN_ZNCC or i in (0, sc.shape[0] - 1) or j in (0, sc.shape[1] - 1):
            continue
        if not _distinct(sc, i, j):
            continue
        peaks.append((i, j))
        kept.append(sc)
    if len(peaks) < MIN_MATCHES:
        return None
    med = np.median(np.array(peaks, dtype=np.float64), axis=0)
    i, j = (int(math.floor(m + 0.5)) for m in med)
    agree = [sc for (pi, pj), sc in zip(peaks, kept) if abs(pi - i) <= 1 and abs(pj - j) <= 1]
    if len(agree) < MIN_MATCHES:
        return None
    mean = np.mean(agree, axis=0)
    di = dj = 0.0
    # an exact match is already at the right integer shift; the tolerance
    # covers float32 rounding in the correlation
    if mean[i, j] < 1.0 - EXACT_TOL:
        if 0 < i < mean.shape[0] - 1:
            di = _parabolic(mean[i - 1, j], mean[i, j], mean[i + 1, j])
        if 0 < j < mean.shape[1] - 1:
            dj = _parabolic(mean[i, j - 1], mean[i, j], mean[i, j + 1])
    return i - radius + di, j - radius + dj


def _match_all(ref, frame, corners, radius):
    surfaces = [sc for sc in (corner_scores(ref, frame, p, radius) for p in corners) if sc is not None]
    return estimate_shift(surfaces, radius)


def stabilize(seq: FrameSequence, n_corners: int = 40, search_radius: int = 12):
    """Per-frame translations against frame 0 and the stabilized sequence.

    Returns ``(translations (T, 2), low_confidence (T,) bool, stabilized)``.
    A translation (dr, dc) means frame content sits (dr, dc) px away from
    where it is in frame 0.
    """
    if n_corners < MIN_MATCHES or search_radius < 1:
        raise InvalidInputError(f"need n_corners >= {MIN_MATCHES} and search_radius >= 1")
    frames = seq.frames
    ref = frames[0]
    margin = search_radius + PATCH // 2 + 1
    if min(ref.shape) <= 2 * margin:
        raise InvalidInputError(f"frames of {ref.shape[1]}x{ref.shape[0]} are too small for search radius {search_radius}")
    corners = harris_corners(ref, n_corners, margin)
    T = len(seq)
    trans = np.zeros((T, 2))
    low = np.zeros(T, dtype=bool)
    out = np.empty_like(frames)
    out[0] = frames[0]
    for t in range(1, T):
        shift = _match_all(ref, frames[t], corners, search_radius)
        if shift is None:
            trans[t] = trans[t - 1]
            low[t] = True
        else:
            # one residual pass on the back-shifted frame removes most of the
            # parabolic fit's pull toward integer shifts
            back = shift_image(frames[t], -shift[0], -shift[1])
            residual = _match_all(ref, back, corners, REFINE_RADIUS)
            trans[t] = np.add(shift, residual) if residual is not None else shift
        out[t] = shift_image(frames[t], -trans[t, 0], -trans[t, 1])
    if low.any():
        log.warning("%d frame(s) had fewer than %d corner matches", int(low.sum()), MIN_MATCHES)
    return trans, low, FrameSequence(out, seq.fps)


# --- spatio-temporal profile ---------------------------------------------------

def resample_path(path: CapillaryPath, smooth: float = 2.0) -> np.ndarray:
    """Path points at unit arc-length steps along the smoothed path."""
    pts = smooth_points(path.points, smooth)
    arc = cumulative_arc(pts)
    if arc[-1] < 1.0:
        raise InvalidInputError("capillary path is shorter than one pixel")
    s = np.arange(0.0, math.floor(arc[-1]) + 1.0)
    return np.stack([np.interp(s, arc, pts[:, 0]), np.interp(s, arc, pts[:, 1])], axis=1)


def path_normals(samples: np.ndarray) -> np.ndarray:
    """Unit normals from a least-squares tangent over a centered 5-point window."""
    n = len(samples)
    normals = np.empty_like(samples)
    for i in range(n):
        lo, hi = max(i - 2, 0), min(i + 3, n)
        idx = np.arange(lo, hi, dtype=np.float64)
        seg = samples[lo:hi]
        tan = np.array([np.polyfit(idx, seg[:, 0], 1)[0], np.polyfit(idx, seg[:, 1], 1)[0]]) if hi - lo > 1 \
            else np.array([1.0, 0.0])
        norm = np.hypot(*tan)
        tan = tan / norm if norm > 0 else np.array([1.0, 0.0])
        normals[i] = (-tan[1], tan[0])
    return normals


@dataclass
class Profile:
    values: np.ndarray   # (T, S)
    samples: np.ndarray  # (S, 2) path points at unit arc steps

    @property
    def center(self) -> tuple[float, float]:
        T, S = self.values.shape
        return (T - 1) / 2.0, (S - 1) / 2.0


def extract_profile(seq: FrameSequence, path: CapillaryPath, dist: np.ndarray) -> Profile:
    """Mean intensity across the vessel (normal segment of half-length = local radius) per frame and arc step."""
    h, w = seq.shape
    if dist.shape != (h, w):
        raise InvalidInputError("distance field and frames differ in size")
    p = path.points
    if p[:, 0].min() < 0 or p[:, 1].min() < 0 or p[:, 0].max() > h - 1 or p[:, 1].max() > w - 1:
        raise InvalidInputError("capillary path leaves the frame")
    samples = resample_path(path)
    normals = path_normals(samples)
    radius = bilinear_sample(dist, samples[:, 0], samples[:, 1])
    rows, cols, owner = [], [], []
    for i, (pt, nv, rad) in enumerate(zip(samples, normals, radius)):
        m = max(int(math.ceil(rad)), 0)
        u = np.linspace(-rad, rad, 2 * m + 1) if m else np.zeros(1)
        rr, cc = pt[0] + u * nv[0], pt[1] + u * nv[1]
        inside = (rr >= 0) & (rr <= h - 1) & (cc >= 0) & (cc <= w - 1)
        if not inside.any():
            rr, cc, inside = np.array([pt[0]]), np.array([pt[1]]), np.array([True])
        rows.append(rr[inside])
        cols.append(cc[inside])
        owner.append(np.full(int(inside.sum()), i))
    rows, cols, owner = np.concatenate(rows), np.concatenate(cols), np.concatenate(owner)
    counts = np.bincount(owner, minlength=len(samples)).astype(np.float64)
    values = np.empty((len(seq), len(samples)))
    for t in range(len(seq)):
        vals = bilinear_sample(seq.frames[t], rows, cols)
        values[t] = np.bincount(owner, weights=vals, minlength=len(samples)) / counts
    return Profile(values, samples)


def detrend(values: np.ndarray) -> np.ndarray:
    """Subtract each column's temporal mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise InvalidInputError("detrend needs a T x S profile with T >= 2")
    return values - values.mean(axis=0, keepdims=True)


# --- Radon transform -------------------------------------------------------------

@dataclass
class Sinogram:
    sums: np.ndarray    # (n_theta, n_rho) unnormalized
    hits: np.ndarray    # (n_theta, n_rho) pixel counts per bin
    theta: np.ndarray   # degrees, uniform over [0, 180)
    rho: np.ndarray     # centered, unit spacing
    profile_shape: tuple[int, int]

    @property
    def normalized(self) -> np.ndarray:
        return self.sums / np.maximum(self.hits, 1)

    @property
    def theta_step(self) -> float:
        return 180.0 / len(self.theta)


def radon(profile: np.ndarray, n_theta: int = 180) -> Sinogram:
    """Pixel-driven Radon transform; each pixel lands in the nearest rho bin once per angle.

    Axes: x = t - t_c (rows), y = s - s_c (columns), rho = x cos(theta) + y sin(theta).
    """
    profile = np.asarray(profile, dtype=np.float64)
    if profile.ndim != 2:
        raise InvalidInputError("radon needs a 2-D profile")
    if n_theta < 2:
        raise InvalidInputError("n_theta must be >= 2")
    T, S = profile.shape
    tc, sc = (T - 1) / 2.0, (S - 1) / 2.0
    half = int(math.ceil(math.hypot(tc, sc))) + 1
    rho = np.arange(-half, half + 1, dtype=np.float64)
    theta = np.arange(n_theta) * (180.0 / n_theta)
    x = (np.arange(T) - tc)[:, None].repeat(S, axis=1).ravel()
    y = (np.arange(S) - sc)[None, :].repeat(T, axis=0).ravel()
    vals = profile.ravel()
    sums = np.zeros((n_theta, len(rho)))
    hits = np.zeros((n_theta, len(rho)), dtype=np.int64)
    for k, th in enumerate(np.deg2rad(theta)):
        idx = np.rint(x * math.cos(th) + y * math.sin(th)).astype(np.int64) + half
        sums[k] = np.bincount(idx, weights=vals, minlength=len(rho))
        hits[k] = np.bincount(idx, minlength=len(rho))
    return Sinogram(sums, hits, theta, rho, (T, S))


# --- peaks and inversion ---------------------------------------------------------

@dataclass(frozen=True)
class Peak:
    theta: float     # degrees
    rho: float       # px
    strength: float


def find_peaks(sino: Sinogram, k_sigma: float = 4.0, nms_theta_deg: float = 10.0, nms_rho: int = 9,
               min_line_fraction: float = 0.5) -> list[Peak]:
    """Strict local maxima of the normalized sinogram above mean + k_sigma * std.

    Bins whose line crosses fewer than ``min_line_fraction * min(T, S)``
    profile pixels are not candidates: their normalized value averages too
    few samples to be trusted.
    """
    if k_sigma <= 0:
        raise InvalidInputError("k_sigma must be > 0")
    norm = sino.normalized
    if not np.any(norm):
        return []
    thr = norm.mean() + k_sigma * norm.std()
    step = sino.theta_step
    wt = max(int(round(nms_theta_deg / step)), 1)
    size = (2 * wt + 1, 2 * int(nms_rho) + 1)
    # theta wraps with a rho flip; pad so the window sees across 0/180
    padded = np.concatenate([norm[-wt:, ::-1], norm, norm[:wt, ::-1]], axis=0)
    fp = np.ones(size, dtype=bool)
    fp[wt, nms_rho] = False
    neigh = ndi.maximum_filter(padded, footprint=fp, mode="constant", cval=-np.inf)[wt:wt + len(norm)]
    cand = (norm > neigh) & (norm > thr)
    cand &= sino.hits >= min_line_fraction * min(sino.profile_shape)
    n_theta = len(sino.theta)
    edge = np.minimum(np.arange(n_theta), n_theta - np.arange(n_theta)) <= 2
    cand[edge] = False
    peaks = []
    for i, j in zip(*np.nonzero(cand)):
        di = _parabolic(norm[i - 1, j], norm[i, j], norm[(i + 1) % n_theta, j])
        dj = _parabolic(norm[i, j - 1], norm[i, j], norm[i, j + 1]) if 0 < j < norm.shape[1] - 1 else 0.0
        peaks.append(Peak(float(sino.theta[i] + di * step), float(sino.rho[j] + dj), float(norm[i, j])))
    peaks.sort(key=lambda p: (-p.strength, p.theta, p.rho))
    return peaks


@dataclass
class WbcEvent:
    speed_px_per_frame: float
    occurrence_frame: float
    occurrence_time_s: float
    peak_strength: float
    theta: float
    rho: float
    speed_um_per_s: float | None = None
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "speed_px_per_frame": self.speed_px_per_frame,
            "speed_um_per_s": self.speed_um_per_s,
            "occurrence_frame": self.occurrence_frame,
            "occurrence_time_s": self.occurrence_time_s,
            "peak_strength": self.peak_strength,
            "theta_deg": self.theta,
            "rho_px": self.rho,
            "flags": list(self.flags),
        }


def invert_peak(theta_deg: float, rho: float, profile_shape: tuple[int, int],
                scale: ScaleConfig = ScaleConfig()) -> WbcEvent:
    """Line (t - t_c) cos + (s - s_c) sin = rho  ->  velocity -cot(theta), time at s = s_c."""
    T, S = profile_shape
    tc = (T - 1) / 2.0
    th = math.radians(theta_deg)
    cos, sin = math.cos(th), math.sin(th)
    flags: tuple[str, ...] = ()
    if theta_deg == 90.0 or abs(cos) < 1e-12:
        v, t = 0.0, tc
        if rho != 0:
            flags = (STATIONARY,)
    else:
        v = -cos / sin
        t = tc + rho / cos
    um = abs(v) * scale.microns_per_pixel * scale.fps if scale.microns_per_pixel is not None else None
    return WbcEvent(v, t, t / scale.fps, 0.0, theta_deg, rho, um, flags)


def merge_events(events: list[WbcEvent], frames: float = 3.0, speed_rel: float = 0.15) -> list[WbcEvent]:
    """Drop events within ``frames`` and ``speed_rel`` of a stronger one."""
    kept: list[WbcEvent] = []
    for ev in sorted(events, key=lambda e: -e.peak_strength):
        dup = any(abs(ev.occurrence_frame - k.occurrence_frame) < frames
                  and abs(ev.speed_px_per_frame - k.speed_px_per_frame)
                  < speed_rel * max(abs(ev.speed_px_per_frame), abs(k.speed_px_per_frame))
                  for k in kept)
        if not dup:
            kept.append(ev)
    return sorted(kept, key=lambda e: e.occurrence_frame)


@dataclass
class FlowResult:
    count: int
    events: list[WbcEvent]
    mean_speed_px_per_frame: float | None
    translations: np.ndarray = field(repr=False)
    low_confidence: np.ndarray = field(repr=False)
    profile: Profile = field(repr=False)
    sinogram: Sinogram = field(repr=False)

    def to_json(self) -> dict:
        return {
            "wbc_count": self.count,
            "mean_speed_px_per_frame": self.mean_speed_px_per_frame,
            "events": [e.to_json() for e in self.events],
            "low_confidence_frames": [int(i) for i in np.nonzero(self.low_confidence)[0]],
            "translations": [[float(a), float(b)] for a, b in self.translations],
        }


def analyze_video(seq: FrameSequence, path: CapillaryPath, dist: np.ndarray, params=None,
                  scale: ScaleConfig | None = None, stabilization=None) -> FlowResult:
    """stabilize -> extract_profile -> detrend -> radon -> find_peaks -> invert_peak -> merge.

    ``params`` is a ``FlowConfig``. ``stabilization`` may carry a previous
    ``stabilize`` result to reuse. Events whose mid-path crossing falls
    outside the video are dropped.
    """
    from .config import FlowConfig

    params = params or FlowConfig()
    scale = scale or ScaleConfig(fps=seq.fps)
    trans, low, stab = stabilization or stabilize(seq, params.n_corners, params.search_radius)
    prof = extract_profile(stab, path, dist)
    sino = radon(detrend(prof.values), params.n_theta)
    peaks = find_peaks(sino, params.k_sigma, params.nms_theta_deg, params.nms_rho, params.min_line_fraction)
    events = []
    T = len(seq)
    for pk in peaks:
        ev = invert_peak(pk.theta, pk.rho, sino.profile_shape, scale)
        ev.peak_strength = pk.strength
        if 0.0 <= ev.occurrence_frame <= T - 1:
            events.append(ev)
    events = merge_events(events, params.merge_frames, params.merge_speed_rel)
    mean = float(np.mean([abs(e.speed_px_per_frame) for e in events])) if events else None
    return FlowResult(len(events), events, mean, trans, low, prof, sino)
