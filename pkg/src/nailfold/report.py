"""Clinical-range diagnosis, subject aggregation and evaluation metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .capillary import Null, is_null
from .imaging import InvalidInputError

REPORT_SCHEMA = "anfc-report/1"
IMAGE_SCHEMA = "anfc-image-report/1"

NORMAL_FLAG = "Normal"
ABNORMAL_FLAG = "Abnormal"

DIAGNOSED = ("crossing_portion", "tortuous_portion", "venous", "arterial", "apical", "length")


@dataclass(frozen=True)
class NormalRanges:
    crossing_portion_max: float = 0.3
    tortuous_portion_max: float = 0.1
    venous_um: tuple[float, float] = (11.0, 17.0)
    arterial_um: tuple[float, float] = (9.0, 13.0)
    apical_um: tuple[float, float] = (12.0, 18.0)
    length_um: tuple[float, float] = (150.0, 250.0)

    def __post_init__(self):
        for name in ("venous_um", "arterial_um", "apical_um", "length_um"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise InvalidInputError(f"range {name} is empty: [{lo}, {hi}]")
        if self.crossing_portion_max < 0 or self.tortuous_portion_max < 0:
            raise InvalidInputError("portion limits must be >= 0")

    def interval(self, feature: str) -> tuple[float, float]:
        if feature == "crossing_portion":
            return 0.0, self.crossing_portion_max
        if feature == "tortuous_portion":
            return 0.0, self.tortuous_portion_max
        return getattr(self, f"{feature}_um")


def diagnose(features: dict, ranges: NormalRanges = NormalRanges()) -> dict:
    """Per-feature flag; closed intervals, so boundary values are Normal. Nulls pass through."""
    flags = {}
    for name in DIAGNOSED:
        value = features.get(name, Null("NotMeasured"))
        if is_null(value):
            flags[name] = value
            continue
        lo, hi = ranges.interval(name)
        flags[name] = NORMAL_FLAG if lo <= value <= hi else ABNORMAL_FLAG
    return flags


# --- metrics ---------------------------------------------------------------------

def _missing(v) -> bool:
    return v is None or is_null(v) or (isinstance(v, float) and math.isnan(v))


def regression_metrics(pred, truth) -> tuple[float, float]:
    """(MAE, RMSE) over pairs where neither side is missing."""
    if len(pred) != len(truth):
        raise InvalidInputError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    pairs = [(p, t) for p, t in zip(pred, truth) if not _missing(p) and not _missing(t)]
    if not pairs:
        raise InvalidInputError("no complete prediction/truth pairs")
    err = np.array([p - t for p, t in pairs], dtype=np.float64)
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def _safe_div(a, b) -> float:
    return a / b if b else 0.0


def classification_metrics(pred, truth, labels=None) -> dict:
    """Accuracy plus per-class and truth-frequency-weighted precision/recall/F1.

    Zero denominators give 0.
    """
    if len(pred) != len(truth):
        raise InvalidInputError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not truth:
        raise InvalidInputError("empty label vectors")
    labels = list(labels) if labels is not None else sorted(set(pred) | set(truth), key=str)
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(pred, truth):
        cm[index[t], index[p]] += 1
    total = int(cm.sum())
    per_class = {}
    for lab, i in index.items():
        tp = int(cm[i, i])
        prec = _safe_div(tp, int(cm[:, i].sum()))
        rec = _safe_div(tp, int(cm[i, :].sum()))
        per_class[lab] = {"precision": prec, "recall": rec, "f1": _safe_div(2 * prec * rec, prec + rec),
                          "support": int(cm[i, :].sum())}
    weighted = {m: sum(per_class[lab][m] * per_class[lab]["support"] for lab in labels) / total
                for m in ("precision", "recall", "f1")}
    return {"accuracy": int(np.trace(cm)) / total, "labels": labels, "confusion": cm.tolist(),
            "per_class": per_class, "weighted": weighted}


def detection_sensitivity(pred_points, truth_points, radius: float = 10.0) -> float:
    """Fraction of truth points claimed by a prediction within ``radius`` (greedy, one-to-one)."""
    if radius <= 0:
        raise InvalidInputError("radius must be > 0")
    if len(truth_points) == 0:
        raise InvalidInputError("no truth points")
    pairs = []
    for i, p in enumerate(pred_points):
        for j, t in enumerate(truth_points):
            d = math.hypot(p[0] - t[0], p[1] - t[1])
            if d <= radius:
                pairs.append((d, j, i))
    used_p, used_t = set(), set()
    for d, j, i in sorted(pairs):
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
    return len(used_t) / len(truth_points)


def pixel_sensitivity(pred_mask, truth_mask) -> float:
    pred_mask = np.asarray(pred_mask, dtype=bool)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if pred_mask.shape != truth_mask.shape:
        raise InvalidInputError(f"mask shapes differ: {pred_mask.shape} vs {truth_mask.shape}")
    n_truth = int(truth_mask.sum())
    if n_truth == 0:
        raise InvalidInputError("truth mask has no foreground")
    return int((pred_mask & truth_mask).sum()) / n_truth


# --- serialization ---------------------------------------------------------------

def encode_value(v):
    if is_null(v):
        return {"value": None, "reason": v.reason}
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return {"value": None, "reason": "NonFinite"}
    return v


def decode_value(v):
    if isinstance(v, dict) and "value" in v:
        return Null(v.get("reason", "Unknown")) if v["value"] is None else v["value"]
    return v


def encode_flags(flags: dict) -> dict:
    return {k: encode_value(v) for k, v in flags.items()}


def build_subject_report(subject_id: str, image_reports: list[dict],
                         ranges: NormalRanges = NormalRanges()) -> dict:
    """Subject features = unweighted mean of non-null per-image values; flags via ``diagnose``."""
    if not image_reports:
        raise InvalidInputError("a subject report needs at least one image report")
    names = []
    for rep in image_reports:
        for k in rep["features"]:
            if k not in names:
                names.append(k)
    features = {}
    for name in names:
        vals = [decode_value(rep["features"].get(name, {"value": None, "reason": "NotMeasured"}))
                for rep in image_reports]
        present = [v for v in vals if not is_null(v)]
        if present:
            features[name] = float(np.mean(present))
        else:
            reasons = Counter(v.reason for v in vals)
            top = max(reasons.values())
            features[name] = Null(sorted(r for r, c in reasons.items() if c == top)[0])
    flags = diagnose(features, ranges)
    return {
        "schema": REPORT_SCHEMA,
        "subject": subject_id,
        "images": [{"image": rep.get("image"), "features": rep["features"]} for rep in image_reports],
        "features": {k: encode_value(v) for k, v in features.items()},
        "flags": encode_flags(flags),
        "ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ranges).items()},
    }
