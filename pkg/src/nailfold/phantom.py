"""Synthetic capillary loops and WBC-transit videos with known ground truth.

A loop is drawn as a dark tube: an arterial limb on the left, a semicircular
cap whose top is ``apex_center``, and a venous limb on the right. The tube is
rendered from its signed distance with a one-pixel soft edge, so pixel
coverage is a linear ramp across the boundary.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree

from .imaging import InvalidInputError, shift_image

TORTUOUS_RATIO = 1.7
_STEP = 0.05


@dataclass
class LoopSpec:
    apex_center: tuple[float, float] = (40.0, 60.0)
    limb_length: float = 60.0
    limb_spacing: float = 28.0
    arterial_width: float = 8.0
    venous_width: float = 10.0
    apex_width: float = 10.0
    tortuosity_amp: float = 0.0
    tortuosity_period: float = 60.0
    crossing: bool = False
    intensity: float = 0.35
    background: float = 0.8
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.apex_center = tuple(float(v) for v in self.apex_center)
        if min(self.arterial_width, self.venous_width, self.apex_width) < 2:
            raise InvalidInputError("tube widths must be >= 2 px")
        if not self.intensity < self.background:
            raise InvalidInputError("vessel intensity must be darker than the background")
        if not self.limb_spacing > (self.arterial_width + self.venous_width) / 2:
            raise InvalidInputError("limb_spacing must exceed the mean limb width")
        if self.limb_length <= 0 or self.noise_sigma < 0 or self.tortuosity_period <= 0:
            raise InvalidInputError("limb_length and tortuosity_period must be > 0, noise_sigma >= 0")
        if self.crossing and self.limb_length < 0.3 * self.limb_length + self.limb_spacing + 5:
            raise InvalidInputError("crossing loop needs limb_length > limb_spacing / 0.7")

    @property
    def radius(self) -> float:
        return self.limb_spacing / 2.0


@dataclass
class TransitSpec:
    speed_px_per_frame: float
    start_frame: float = 0.0
    blob_sigma: float = 2.0
    blob_amplitude: float = 0.3
    direction: str = "+s"

    def __post_init__(self):
        if self.speed_px_per_frame == 0:
            raise InvalidInputError("transit speed must be non-zero")
        if self.direction not in ("+s", "-s"):
            raise InvalidInputError("direction must be '+s' or '-s'")
        if self.blob_sigma <= 0 or self.blob_amplitude <= 0:
            raise InvalidInputError("blob_sigma and blob_amplitude must be > 0")

    @property
    def velocity(self) -> float:
        """Signed speed along the centerline (arterial -> venous is positive)."""
        v = abs(self.speed_px_per_frame)
        return v if self.direction == "+s" else -v


@dataclass
class Centerline:
    points: np.ndarray      # (N, 2) float (row, col), arterial end first
    half_width: np.ndarray  # (N,)
    arc: np.ndarray         # (N,) cumulative arc length
    apex_index: int

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        return np.array([np.interp(s, self.arc, self.points[:, 0]), np.interp(s, self.arc, self.points[:, 1])])

    def arc_of(self, point) -> float:
        """Arc position of the centerline point nearest to ``point``."""
        d = np.hypot(*(self.points - np.asarray(point, dtype=np.float64)).T)
        return float(self.arc[int(np.argmin(d))])


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _limb_offset(spec: LoopSpec, d: np.ndarray, side: int) -> np.ndarray:
    """Column of a limb at vertical distance ``d`` below the cap; ``side`` -1 left, +1 right."""
    r = spec.radius
    col = np.full_like(d, side * r)
    if spec.crossing:
        d0 = 0.3 * spec.limb_length
        run = np.clip(d - d0, 0.0, 2.0 * r)
        col = side * r - side * run
    if spec.tortuosity_amp:
        col = col + spec.tortuosity_amp * np.sin(2.0 * np.pi * d / spec.tortuosity_period)
    return col


def centerline(spec: LoopSpec) -> Centerline:
    r0, c0 = spec.apex_center
    rad = spec.radius
    d = np.arange(0.0, spec.limb_length + _STEP / 2, _STEP)
    left = np.stack([r0 + rad + d, c0 + _limb_offset(spec, d, -1)], axis=1)[::-1]
    right = np.stack([r0 + rad + d, c0 + _limb_offset(spec, d, +1)], axis=1)
    n_cap = max(int(math.ceil(math.pi * rad / _STEP)), 8)
    phi = np.linspace(math.pi, 0.0, n_cap + 1)[1:-1]
    cap = np.stack([r0 + rad - rad * np.sin(phi), c0 + rad * np.cos(phi)], axis=1)
    points = np.concatenate([left, cap, right])
    u = (math.pi - phi) / math.pi  # 0 at the arterial junction, 1 at the venous one
    wa, wv, wp = spec.arterial_width, spec.venous_width, spec.apex_width
    cap_w = np.where(u <= 0.5, wa + (wp - wa) * _smoothstep(u / 0.25),
                     wv + (wp - wv) * _smoothstep((1.0 - u) / 0.25))
    width = np.concatenate([np.full(len(left), wa), cap_w, np.full(len(right), wv)])
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(points, axis=0).T))])
    apex_index = len(left) + int(np.argmin(np.abs(phi - math.pi / 2)))
    return Centerline(points, width / 2.0, arc, apex_index)


def loop_tortuosity(cl: Centerline) -> float:
    """Largest arc/chord ratio of the two apex-to-limb-end halves."""
    k = cl.apex_index
    ratios = []
    for lo, hi in ((0, k), (k, len(cl.points) - 1)):
        chord = float(np.hypot(*(cl.points[hi] - cl.points[lo])))
        ratios.append((cl.arc[hi] - cl.arc[lo]) / chord)
    return max(ratios)


def _coverage(cl: Centerline, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    reach = cl.half_width.max() + 2.0
    rmin = max(int(math.floor(cl.points[:, 0].min() - reach)), 0)
    rmax = min(int(math.ceil(cl.points[:, 0].max() + reach)), h - 1)
    cmin = max(int(math.floor(cl.points[:, 1].min() - reach)), 0)
    cmax = min(int(math.ceil(cl.points[:, 1].max() + reach)), w - 1)
    cov = np.zeros(shape)
    if rmin > rmax or cmin > cmax:
        return cov
    rr, cc = np.mgrid[rmin:rmax + 1, cmin:cmax + 1]
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    # nearest few samples; the signed distance uses the local half-width
    dist, idx = cKDTree(cl.points).query(pix, k=8)
    sdf = (dist - cl.half_width[idx]).min(axis=1)
    cov[rmin:rmax + 1, cmin:cmax + 1] = np.clip(0.5 - sdf, 0.0, 1.0).reshape(rr.shape)
    return cov


def loop_class(spec: LoopSpec, cl: Centerline | None = None) -> str:
    cl = cl or centerline(spec)
    if spec.crossing:
        return "crossing"
    if loop_tortuosity(cl) > TORTUOUS_RATIO:
        return "tortuous"
    return "normal"


@dataclass
class LoopTruth:
    arterial_width: float
    venous_width: float
    apex_width: float
    length: float
    tortuosity: float
    morph: str
    apex: tuple[float, float]
    arterial: tuple[float, float]
    venous: tuple[float, float]


@dataclass
class ImageTruth:
    loops: list[LoopTruth]
    mask: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {"schema": "anfc-phantom-image/1", "loops": [asdict(lp) for lp in self.loops]}


def _truth(spec: LoopSpec, cl: Centerline) -> LoopTruth:
    tort = loop_tortuosity(cl)
    return LoopTruth(
        arterial_width=spec.arterial_width,
        venous_width=spec.venous_width,
        apex_width=spec.apex_width,
        length=cl.length,
        tortuosity=tort,
        morph=loop_class(spec, cl),
        apex=tuple(map(float, cl.points[cl.apex_index])),
        arterial=tuple(map(float, cl.points[0])),
        venous=tuple(map(float, cl.points[-1])),
    )


def _bbox(cl: Centerline) -> tuple[float, float, float, float]:
    m = cl.half_width.max()
    return (cl.points[:, 0].min() - m, cl.points[:, 1].min() - m,
            cl.points[:, 0].max() + m, cl.points[:, 1].max() + m)


def render_coverage(specs: list[LoopSpec], canvas: tuple[int, int], allow_overlap: bool = False):
    """Max tube coverage over all loops plus their centerlines. ``canvas`` is (W, H)."""
    w, h = canvas
    cls = [centerline(s) for s in specs]
    boxes = [_bbox(cl) for cl in cls]
    for box in boxes:
        if box[0] < 0 or box[1] < 0 or box[2] > h - 1 or box[3] > w - 1:
            raise InvalidInputError(f"loop with extent {tuple(round(b, 1) for b in box)} leaves the {w}x{h} canvas")
    if not allow_overlap:
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                if a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]:
                    raise InvalidInputError(f"loops {i} and {j} overlap")
    cov = np.zeros((h, w))
    for cl in cls:
        np.maximum(cov, _coverage(cl, (h, w)), out=cov)
    return cov, cls


def synth_image(specs: list[LoopSpec], canvas: tuple[int, int] = (256, 192),
                allow_overlap: bool = False) -> tuple[np.ndarray, ImageTruth]:
    """Render loops on a (W, H) canvas. Background level, noise and seed come from ``specs[0]``."""
    if not specs:
        raise InvalidInputError("need at least one loop")
    cov, cls = render_coverage(specs, canvas, allow_overlap)
    first = specs[0]
    img = first.background + (first.intensity - first.background) * cov
    if first.noise_sigma > 0:
        img = img + np.random.default_rng(first.seed).normal(0.0, first.noise_sigma, img.shape)
    truth = ImageTruth([_truth(s, cl) for s, cl in zip(specs, cls)], cov > 0.5)
    return np.clip(img, 0.0, 1.0), truth


@dataclass
class VideoTruth:
    loop: LoopTruth
    centerline: Centerline = field(repr=False)
    transits: list[TransitSpec]
    jitter: list[tuple[float, float]]
    fps: float
    n_frames: int
    mask: np.ndarray = field(repr=False)

    def crossing_frame(self, k: int, arc_pos: float) -> float:
        """Frame at which transit ``k`` passes centerline arc position ``arc_pos``."""
        tr = self.transits[k]
        travelled = arc_pos if tr.direction == "+s" else self.centerline.length - arc_pos
        return tr.start_frame + travelled / abs(tr.speed_px_per_frame)

    def mid_crossing_frame(self, k: int) -> float:
        return self.crossing_frame(k, self.centerline.length / 2.0)

    def to_json(self) -> dict:
        return {
            "schema": "anfc-phantom-video/1",
            "fps": self.fps,
            "n_frames": self.n_frames,
            "loop": asdict(self.loop),
            "transits": [
                dict(asdict(t), velocity_px_per_frame=t.velocity, mid_crossing_frame=self.mid_crossing_frame(k))
                for k, t in enumerate(self.transits)
            ],
            "jitter": [list(map(float, j)) for j in self.jitter],
        }


def _smooth_texture(shape, rng, amplitude: float) -> np.ndarray:
    field_ = ndi.gaussian_filter(rng.normal(size=shape), 2.0)
    return amplitude * field_ / (field_.std() + 1e-12)


def synth_video(loop: LoopSpec, transits: list[TransitSpec], n_frames: int,
                jitter: list[tuple[float, float]] | None = None, fps: float = 20.0,
                canvas: tuple[int, int] = (160, 160), texture: float = 0.0) -> tuple[np.ndarray, VideoTruth]:
    """Render a (T, H, W) video of one static loop with bright blobs moving along its centerline.

    Each frame is bilinear-shifted by its jitter vector, then receives fresh
    Gaussian noise (``loop.noise_sigma``). ``texture`` adds a static smooth
    background pattern, which gives the stabilizer something to lock onto.
    A transit must pass the centerline midpoint within the video.
    """
    if n_frames < 2:
        raise InvalidInputError("need at least two frames")
    jitter = [(0.0, 0.0)] * n_frames if jitter is None else [tuple(map(float, j)) for j in jitter]
    if len(jitter) != n_frames:
        raise InvalidInputError("jitter must list one (dr, dc) per frame")
    cov, (cl,) = render_coverage([loop], canvas)
    truth = VideoTruth(_truth(loop, cl), cl, list(transits), jitter, fps, n_frames, cov > 0.5)
    for k in range(len(transits)):
        mid = truth.mid_crossing_frame(k)
        if not 0 <= mid <= n_frames - 1:
            raise InvalidInputError(f"transit {k} passes the loop midpoint at frame {mid:.1f}, outside the video")

    rng = np.random.default_rng(loop.seed)
    static = loop.background + (loop.intensity - loop.background) * cov
    if texture:
        static = static + _smooth_texture(static.shape, rng, texture)
    h, w = static.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((n_frames, h, w))
    for t in range(n_frames):
        frame = static.copy()
        for tr in transits:
            travelled = abs(tr.speed_px_per_frame) * (t - tr.start_frame)
            pos = travelled if tr.direction == "+s" else cl.length - travelled
            if not 0.0 <= pos <= cl.length:
                continue
            pr, pc = cl.at(pos)
            frame += tr.blob_amplitude * np.exp(-((rr - pr) ** 2 + (cc - pc) ** 2) / (2.0 * tr.blob_sigma ** 2))
        frame = shift_image(frame, *jitter[t])
        if loop.noise_sigma > 0:
            frame = frame + rng.normal(0.0, loop.noise_sigma, frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)
    return frames, truth
