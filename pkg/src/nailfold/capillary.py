"""Per-capillary keypoints, matching, classification and size measurements."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .imaging import InvalidInputError, ScaleConfig, bilinear_sample
from .segmentation import UNMATCHED, CapillaryInstance, Rect
from .skeleton import CROSSING, CapillaryPath, SkeletonGraph, polyline_arc_length

NORMAL = "normal"
CROSSING_CLASS = "crossing"
TORTUOUS = "tortuous"
CLASSES = (NORMAL, CROSSING_CLASS, TORTUOUS)

NATIVE = "native"
INGESTED = "ingested"

MISSING_SCALE = "MissingScale"
INSUFFICIENT_CLEAR = "InsufficientClearCapillaries"

LIMB_FRACTION = 0.25
MAX_OFF_PATH = 15.0


class InvalidLoopOrientation(ValueError):
    pass


class KeypointOffPath(ValueError):
    pass


@dataclass(frozen=True)
class Null:
    """A missing value together with the reason it is missing."""

    reason: str

    def __bool__(self):
        return False


def is_null(v) -> bool:
    return isinstance(v, Null)


@dataclass
class KeypointSet:
    apex: tuple[float, float]
    arterial: tuple[float, float]
    venous: tuple[float, float]
    source: str = NATIVE
    scores: dict | None = None
    instance_id: int | None = None
    flags: tuple[str, ...] = ()


# --- path helpers ----------------------------------------------------------------

def cumulative_arc(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    steps = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    return np.concatenate([[0.0], np.cumsum(steps)])


def smooth_points(points: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Gaussian smoothing of path coordinates; removes the 8-step staircase bias in lengths.

    Open paths are padded by point reflection through each end, so straight
    ends keep their position (edge replication would pull them inward by
    about 0.8 sigma). Closed paths wrap.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3 or sigma <= 0:
        return pts.copy()
    if np.array_equal(pts[0], pts[-1]):
        ring = np.stack([ndi.gaussian_filter1d(pts[:-1, k], sigma, mode="wrap") for k in (0, 1)], axis=1)
        return np.concatenate([ring, ring[:1]])
    pad = min(int(4 * sigma + 0.5), len(pts) - 1)
    head = 2 * pts[0] - pts[pad:0:-1]
    tail = 2 * pts[-1] - pts[-2:-pad - 2:-1]
    ext = np.concatenate([head, pts, tail])
    out = np.stack([ndi.gaussian_filter1d(ext[:, k], sigma, mode="nearest") for k in (0, 1)], axis=1)
    return out[pad:pad + len(pts)]


def ridge_centred(points: np.ndarray, dist: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Smoothed path points moved sideways onto the distance-field ridge.

    Each point shifts along its normal to the centroid of the samples
    within 0.5 of the local maximum over +-1.5 px, then the result is
    smoothed again. Thinning sits up to a pixel off-centre on tight bends,
    which shortens a thick loop's cap by 1-2 px.
    """
    p = smooth_points(points, sigma)
    if len(p) < 3 or np.array_equal(p[0], p[-1]):
        return p
    tangent = np.gradient(p, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True) + 1e-12
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    offsets = np.linspace(-1.5, 1.5, 13)
    samples = np.stack([bilinear_sample(dist, p[:, 0] + o * normal[:, 0], p[:, 1] + o * normal[:, 1])
                        for o in offsets], axis=1)
    weights = np.clip(samples - samples.max(axis=1, keepdims=True) + 0.5, 0.0, None)
    shift = (weights * offsets).sum(axis=1) / weights.sum(axis=1)
    return smooth_points(p + shift[:, None] * normal, sigma)


def path_widths(path: CapillaryPath, dist: np.ndarray) -> np.ndarray:
    """Twice the distance ridge value at each path pixel (max over its 3x3 neighbourhood).

    Thinning can leave a skeleton pixel one step off the distance ridge, most
    often on a loop's cap; sampling that pixel alone reads 2 px narrow.
    """
    p = np.asarray(path.points, dtype=np.int64)
    h, w = dist.shape
    best = np.zeros(len(p))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr = np.clip(p[:, 0] + dr, 0, h - 1)
            cc = np.clip(p[:, 1] + dc, 0, w - 1)
            np.maximum(best, dist[rr, cc], out=best)
    return 2.0 * best


def trim_tips(path: CapillaryPath, dist: np.ndarray, tolerance: float = 0.75, window: int = 10) -> CapillaryPath:
    """Drop end pixels that thinning pushed into the rounded tip of a tube.

    An end pixel goes while its distance value sits more than ``tolerance``
    below the median over the next ``window`` pixels. Closed paths are left
    alone.
    """
    pts = path.points
    if len(pts) < 2 * window + 2 or path.chord_length == 0:
        return path
    d = bilinear_sample(dist, pts[:, 0], pts[:, 1])
    lo, hi = 0, len(pts) - 1
    while hi - lo > 2 * window and d[lo] < np.median(d[lo + 1:lo + 1 + window]) - tolerance:
        lo += 1
    while hi - lo > 2 * window and d[hi] < np.median(d[hi - window:hi]) - tolerance:
        hi -= 1
    return CapillaryPath(pts[lo:hi + 1])


def _reach(start, direction, dist, limit: float = 64.0, step: float = 0.25):
    """Distance from ``start`` along ``direction`` to the first background pixel centre.

    The rounded position switches to that pixel half a pixel before its
    centre, hence the +0.5. None when nothing is hit within ``limit``.
    """
    h, w = dist.shape
    for k in range(1, int(limit / step) + 1):
        r, c = np.rint(start + k * step * direction).astype(int)
        if not (0 <= r < h and 0 <= c < w) or dist[r, c] == 0:
            return k * step + 0.5
    return None


def _tip_shortfall(seq: np.ndarray, dist: np.ndarray, window: int):
    """(unit tangent, distance from the last point of ``seq`` to the estimated tube end).

    Along the end tangent the first background pixel centre lies one tube
    radius beyond the true end; the radius is the median half-span across the
    tube over the last ``window`` points, measured with the same pixel-centre
    convention. The plain distance value under-reads the radius when thinning
    picks one of two equally central columns. None when undefined.
    """
    tail = seq[-window:].astype(np.float64)
    end = tail[-1]
    direction = end - tail[0]
    norm = math.hypot(*direction)
    if norm == 0:
        return None
    direction /= norm
    normal = np.array([-direction[1], direction[0]])
    spans = [(a + b) / 2 for a, b in ((_reach(p, normal, dist), _reach(p, -normal, dist)) for p in tail)
             if a is not None and b is not None]
    if not spans:
        return None
    radius = float(np.median(spans))
    # thinning may stop up to a radius short of the end
    reach = _reach(end, direction, dist, 3 * radius + 5)
    if reach is None:
        return None
    return direction, reach - radius


def extend_tips(path: CapillaryPath, dist: np.ndarray, window: int = 10) -> CapillaryPath:
    """Carry each open path end out to the nearest pixel of the tube's centreline end.

    Thinning stops a few pixels inside a rounded tip. Ends are never pulled
    back here; ``tip_residuals`` gives the sub-pixel remainder.
    """
    pts = path.points
    if len(pts) < window + 2 or path.chord_length == 0:
        return path
    ends = []
    for seq in (pts[::-1], pts):
        found = _tip_shortfall(seq, dist, window)
        added: list[tuple[int, int]] = []
        if found is not None:
            direction, extra = found
            end = seq[-1].astype(np.float64)
            last = tuple(seq[-1])
            for k in range(1, int(round(extra)) + 1):
                q = tuple(np.rint(end + k * direction).astype(int).tolist())
                if q != last and dist[q] > 0:
                    added.append(q)
                    last = q
        ends.append(added)
    head = np.array(ends[0][::-1], dtype=np.int64).reshape(-1, 2)
    tail = np.array(ends[1], dtype=np.int64).reshape(-1, 2)
    return CapillaryPath(np.concatenate([head, pts, tail]))


def _cap_edges(mask: np.ndarray, end: np.ndarray, radius: float) -> np.ndarray:
    """Midpoints of inside/outside 4-neighbour pixel pairs within 2 radii of ``end``."""
    h, w = mask.shape
    r0, c0 = np.maximum(np.floor(end - 2 * radius - 1).astype(int), 0)
    r1, c1 = np.minimum(np.ceil(end + 2 * radius + 2).astype(int), (h, w))
    sub = np.pad(mask[r0:r1, c0:c1], 1)  # frame edge counts as outside
    out = []
    for dr, dc in ((1, 0), (0, 1)):
        a, b = sub[:sub.shape[0] - dr, :sub.shape[1] - dc], sub[dr:, dc:]
        rr, cc = np.nonzero(a != b)
        out.append(np.column_stack([rr + dr / 2, cc + dc / 2]))
    pts = np.concatenate(out) + np.array([r0 - 1, c0 - 1])
    return pts[np.hypot(*(pts - end).T) <= 2 * radius]


def tip_residuals(path: CapillaryPath, dist: np.ndarray, window: int = 10) -> tuple[float, float]:
    """Signed sub-pixel distance from each path end to the centre of the tube's rounded cap.

    The cap centre comes from an algebraic circle fit to the mask boundary
    ahead of the end, so the quantization of single-pixel reads averages out.
    Clipped to [-1, 1]: after ``extend_tips`` anything larger means the cap is
    not round (a branch, a frame edge, a ragged segmentation).
    """
    pts = path.points
    if len(pts) < window + 2 or path.chord_length == 0:
        return 0.0, 0.0
    mask = dist > 0
    out = []
    for seq in (pts[::-1], pts):
        found = _tip_shortfall(seq, dist, window)
        if found is None:
            out.append(0.0)
            continue
        direction = found[0]
        end = seq[-1].astype(np.float64)
        radius = max(float(dist[tuple(seq[-1])]), 1.0)
        edges = _cap_edges(mask, end, radius + 1)
        ahead = edges[(edges - end) @ direction >= -0.5]
        if len(ahead) < 5:
            out.append(0.0)
            continue
        design = np.column_stack([ahead, np.ones(len(ahead))])
        coef, *_ = np.linalg.lstsq(design, -(ahead ** 2).sum(axis=1), rcond=None)
        centre = -coef[:2] / 2
        out.append(float(np.clip((centre - end) @ direction, -1.0, 1.0)))
    return out[0], out[1]


def apex_index(path: CapillaryPath) -> int:
    """Topmost path point; ties go to the smaller column."""
    p = path.points
    return int(np.lexsort((p[:, 1], p[:, 0]))[0])


def tortuosity_index(path: CapillaryPath, smooth: float = 2.0) -> float:
    """Largest arc/chord ratio over the two apex-to-end halves of a loop path.

    A path whose apex is one of its ends is treated as a single limb.
    """
    pts = smooth_points(path.points, smooth)
    if path.chord_length == 0:
        return math.inf
    k = apex_index(path)
    arc = cumulative_arc(pts)
    halves = [(0, k), (k, len(pts) - 1)]
    ratios = []
    for lo, hi in halves:
        if hi - lo < 1:
            continue
        chord = float(np.hypot(*(pts[hi] - pts[lo])))
        ratios.append((arc[hi] - arc[lo]) / chord if chord > 0 else math.inf)
    return max(ratios) if ratios else 1.0


def _limb_window(arc: np.ndarray, i: int, k: int) -> np.ndarray:
    """Path indices covering LIMB_FRACTION of the limb arc, from index ``i`` toward apex ``k``."""
    if i == k:
        return np.array([i])
    if i < k:
        span = LIMB_FRACTION * (arc[k] - arc[0])
        j = np.arange(i, k + 1)
        return j[arc[j] - arc[i] <= span]
    span = LIMB_FRACTION * (arc[-1] - arc[k])
    j = np.arange(k, i + 1)
    return j[arc[i] - arc[j] <= span]


# --- keypoints -------------------------------------------------------------------

def detect_keypoints(path: CapillaryPath, dist: np.ndarray, instance_id: int | None = None) -> KeypointSet:
    """Apex = topmost path point; the narrower limb end (over its terminal quarter) is arterial."""
    pts = path.points
    if len(pts) == 0:
        raise InvalidInputError("empty path")
    k = apex_index(path)
    n = len(pts) - 1
    flags: tuple[str, ...] = ()
    if k in (0, n):
        lowest = int(np.argmax(pts[:, 0]))
        if 0 < lowest < n and pts[0, 0] < pts[lowest, 0] and pts[n, 0] < pts[lowest, 0]:
            raise InvalidLoopOrientation("loop opens upward: both ends lie above its lowest point")
        flags = ("SingleLimb",)
    arc = cumulative_arc(pts)
    widths = path_widths(path, dist)
    w_first = widths[_limb_window(arc, 0, k)].mean()
    w_last = widths[_limb_window(arc, n, k)].mean()
    first, last = tuple(map(float, pts[0])), tuple(map(float, pts[n]))
    if math.isclose(w_first, w_last, rel_tol=0.0, abs_tol=1e-9):
        arterial, venous = (first, last) if first[1] <= last[1] else (last, first)
    elif w_first < w_last:
        arterial, venous = first, last
    else:
        arterial, venous = last, first
    return KeypointSet(tuple(map(float, pts[k])), arterial, venous, NATIVE, None, instance_id, flags)


def ingest_keypoints(source, shape: tuple[int, int]) -> tuple[list[KeypointSet], list[str]]:
    """Parse keypoint JSON (a top-level array of capillary objects).

    Entries with points outside the image or an apex below a limb are
    dropped and reported in the returned warnings.
    """
    if isinstance(source, (str, Path)) and Path(source).is_file():
        text = Path(source).read_text()
    elif isinstance(source, (str, Path)):
        raise InvalidInputError(f"no such keypoint file: {source}")
    else:
        text = source.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"keypoint file: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise InvalidInputError("keypoint file: top level must be an array")
    h, w = shape
    out, warnings = [], []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise InvalidInputError(f"keypoint file: entry {i} is not an object")
        unknown = set(entry) - {"apex", "arterial", "venous", "scores"}
        if unknown:
            raise InvalidInputError(f"keypoint file: entry {i}: unknown field {sorted(unknown)[0]!r}")
        pts = {}
        for name in ("apex", "arterial", "venous"):
            val = entry.get(name)
            if (not isinstance(val, list) or len(val) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val)):
                raise InvalidInputError(f"keypoint file: entry {i}: field {name!r} must be [row, col]")
            pts[name] = (float(val[0]), float(val[1]))
        scores = entry.get("scores")
        if scores is not None:
            if not isinstance(scores, dict) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in scores.values()):
                raise InvalidInputError(f"keypoint file: entry {i}: field 'scores' must map class names to numbers")
            scores = {str(k).lower(): float(v) for k, v in scores.items()}
        bad = [n for n, (r, c) in pts.items() if not (0 <= r <= h - 1 and 0 <= c <= w - 1)]
        if bad:
            warnings.append(f"entry {i}: {bad[0]} point {pts[bad[0]]} outside the {w}x{h} image; dropped")
            continue
        if pts["apex"][0] > min(pts["arterial"][0], pts["venous"][0]):
            warnings.append(f"entry {i}: apex lies below a limb point; dropped")
            continue
        out.append(KeypointSet(pts["apex"], pts["arterial"], pts["venous"], INGESTED, scores))
    return out, warnings


# --- matching --------------------------------------------------------------------

def match(keypoint_sets: list[KeypointSet], instances: list[CapillaryInstance],
          dilation: int = 5) -> tuple[list[tuple[int, KeypointSet]], list[KeypointSet]]:
    """One-to-one keypoint/instance assignment.

    Returns ``(pairs, unassigned_keypoints)``. Native keypoint sets carrying
    an ``instance_id`` pair with that instance directly. Ingested sets go
    greedily by apex-to-instance distance (ties: lower instance id) among
    instances whose bounding box, grown by ``dilation``, holds the apex; kept
    instances left without a partner are excluded as Unmatched.
    """
    kept = [inst for inst in instances if inst.kept]
    by_id = {inst.id: inst for inst in kept}
    pairs: list[tuple[int, KeypointSet]] = []
    taken_inst: set[int] = set()
    taken_kp: set[int] = set()
    candidates = []
    for j, kp in enumerate(keypoint_sets):
        if kp.source == NATIVE and kp.instance_id is not None:
            if kp.instance_id in by_id and kp.instance_id not in taken_inst:
                pairs.append((kp.instance_id, kp))
                taken_inst.add(kp.instance_id)
                taken_kp.add(j)
            continue
        ar, ac = kp.apex
        for inst in kept:
            r0, c0, r1, c1 = inst.bbox
            if r0 - dilation <= ar <= r1 + dilation and c0 - dilation <= ac <= c1 + dilation:
                d = float(np.min(np.hypot(inst.pixels[:, 0] - ar, inst.pixels[:, 1] - ac)))
                candidates.append((d, inst.id, j))
    ingested_used = False
    for d, iid, j in sorted(candidates):
        ingested_used = True
        if iid in taken_inst or j in taken_kp:
            continue
        pairs.append((iid, keypoint_sets[j]))
        taken_inst.add(iid)
        taken_kp.add(j)
    if ingested_used or any(kp.source == INGESTED for kp in keypoint_sets):
        for inst in kept:
            if inst.id not in taken_inst:
                inst.exclude(UNMATCHED)
    pairs.sort(key=lambda t: t[0])
    return pairs, [kp for j, kp in enumerate(keypoint_sets) if j not in taken_kp]


# --- classification --------------------------------------------------------------

def classify(graph: SkeletonGraph, path: CapillaryPath, tau_tortuous: float = 1.7,
             external_scores: dict | None = None) -> str:
    """Normal / crossing / tortuous.

    External scores win when given: argmax over the three reporting classes
    (other heads are ignored), ties resolved normal > crossing > tortuous.
    """
    if not tau_tortuous > 1:
        raise InvalidInputError("tau_tortuous must be > 1")
    if external_scores:
        vals = [external_scores.get(c, -math.inf) for c in CLASSES]
        if max(vals) > -math.inf:
            return CLASSES[int(np.argmax(vals))]
    if graph.count(CROSSING) >= 1:
        return CROSSING_CLASS
    if tortuosity_index(path) > tau_tortuous:
        return TORTUOUS
    return NORMAL


# --- measurements ----------------------------------------------------------------

@dataclass(frozen=True)
class Diameters:
    apical: float
    arterial: float
    venous: float


def _nearest_index(points: np.ndarray, kp) -> int:
    d = np.hypot(points[:, 0] - kp[0], points[:, 1] - kp[1])
    i = int(np.argmin(d))
    if d[i] > MAX_OFF_PATH:
        raise KeypointOffPath(f"keypoint {tuple(kp)} is {d[i]:.1f} px from the skeleton path")
    return i


def measure_diameters(keypoints: KeypointSet, dist: np.ndarray, path: CapillaryPath) -> Diameters:
    """Widths (px) as twice the distance ridge value on the skeleton path (see ``path_widths``).

    The apex is sampled at its nearest path point. Each limb is averaged over
    a quarter of that limb's arc, starting at the path point nearest its
    keypoint and running toward the apex.
    """
    pts = path.points
    widths = path_widths(path, dist)
    arc = cumulative_arc(pts)
    k = _nearest_index(pts, keypoints.apex)
    limb = []
    for kp in (keypoints.arterial, keypoints.venous):
        i = _nearest_index(pts, kp)
        limb.append(float(widths[_limb_window(arc, i, k)].mean()))
    return Diameters(float(widths[k]), limb[0], limb[1])


@dataclass
class CapillaryMeasurement:
    instance_id: int
    keypoints: KeypointSet
    apical_px: float
    arterial_px: float
    venous_px: float
    length_px: float
    morph: str
    tortuosity_index: float
    scale: ScaleConfig = field(default_factory=ScaleConfig)

    def microns(self, name: str):
        px = getattr(self, f"{name}_px")
        if self.scale.microns_per_pixel is None:
            return Null(MISSING_SCALE)
        return px * self.scale.microns_per_pixel


def density(apexes, region: Rect, scale: ScaleConfig):
    """Capillaries per mm across the counting region's width."""
    if scale.microns_per_pixel is None:
        return Null(MISSING_SCALE)
    n = sum(region.contains(r, c) for r, c in apexes)
    return n / (region.width * scale.microns_per_pixel / 1000.0)


SIZE_FEATURES = ("apical", "arterial", "venous", "length")


@dataclass
class ImageFeatures:
    n_total: int
    n_kept: int
    n_excluded: int
    crossing_portion: float | Null
    tortuous_portion: float | Null
    normal_portion: float | Null
    density_per_mm: float | Null
    mean_px: dict  # feature -> float | Null
    mean_um: dict  # feature -> float | Null

    def feature(self, name: str):
        """Diagnosable value by report name (sizes in microns)."""
        if name in ("crossing_portion", "tortuous_portion"):
            return getattr(self, name)
        return self.mean_um[name]


def aggregate(measurements: list[CapillaryMeasurement], n_total: int, n_excluded: int,
              min_clear: int = 3, density_per_mm=None, scale: ScaleConfig = ScaleConfig()) -> ImageFeatures:
    """Fold per-capillary measurements (in instance-id order) into image features."""
    if min_clear < 1:
        raise InvalidInputError("min_clear must be >= 1")
    ms = sorted(measurements, key=lambda m: m.instance_id)
    n = len(ms)
    if n < min_clear:
        null = Null(INSUFFICIENT_CLEAR)
        return ImageFeatures(n_total, n, n_excluded, null, null, null, null,
                             {f: null for f in SIZE_FEATURES}, {f: null for f in SIZE_FEATURES})
    counts = {c: sum(m.morph == c for m in ms) for c in CLASSES}
    mean_px = {f: float(np.mean([getattr(m, f"{f}_px") for m in ms])) for f in SIZE_FEATURES}
    if scale.microns_per_pixel is None:
        mean_um = {f: Null(MISSING_SCALE) for f in SIZE_FEATURES}
    else:
        mean_um = {f: v * scale.microns_per_pixel for f, v in mean_px.items()}
    if density_per_mm is None:
        density_per_mm = Null(MISSING_SCALE)
    return ImageFeatures(n_total, n, n_excluded, counts[CROSSING_CLASS] / n, counts[TORTUOUS] / n,
                         counts[NORMAL] / n, density_per_mm, mean_px, mean_um)
