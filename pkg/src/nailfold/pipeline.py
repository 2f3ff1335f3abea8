"""End-to-end image analysis: preprocess, segment, filter, keypoint, classify, measure, report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capillary import (
    NATIVE,
    CapillaryMeasurement,
    InvalidLoopOrientation,
    KeypointOffPath,
    KeypointSet,
    aggregate,
    classify,
    cumulative_arc,
    density,
    detect_keypoints,
    extend_tips,
    match,
    measure_diameters,
    ridge_centred,
    tip_residuals,
    tortuosity_index,
    trim_tips,
)
from .config import PipelineConfig
from .imaging import InvalidInputError, check_gray, distance_transform, standardize
from .report import IMAGE_SCHEMA, diagnose, encode_flags, encode_value
from .segmentation import (
    CapillaryInstance,
    clarity_filter,
    default_area_gates,
    extract_instances,
    segment,
)
from .skeleton import CapillaryPath, EmptyGraphError, SkeletonGraph, graphify, main_path, prune, thin

_PAD = 3
# smaller than the sigma used for tortuosity: wider smoothing cuts the corner of a tight cap,
# and 1.5 px still removes the 8-step staircase excess (< 0.2% at any angle)
LENGTH_SMOOTH = 1.5


@dataclass
class InstanceGeometry:
    dist: np.ndarray       # distance field in full-image coordinates
    skeleton: np.ndarray   # full-image boolean skeleton
    graph: SkeletonGraph   # crop coordinates
    path: CapillaryPath    # full-image coordinates
    width_estimate: float


def instance_geometry(inst: CapillaryInstance, shape, min_spur: float = 8.0) -> InstanceGeometry:
    """Distance field, pruned skeleton, graph and main path of one instance."""
    r0, c0, r1, c1 = inst.bbox
    top, left = max(r0 - _PAD, 0), max(c0 - _PAD, 0)
    bottom, right = min(r1 + _PAD + 1, shape[0]), min(c1 + _PAD + 1, shape[1])
    crop = np.zeros((bottom - top, right - left), dtype=bool)
    crop[inst.pixels[:, 0] - top, inst.pixels[:, 1] - left] = True
    # a crop edge that is not the image edge sits on background padding, so the
    # border-as-background rule only bites where the image itself ends
    dist_c = distance_transform(crop)
    skel_c = prune(thin(crop), min_spur)
    widths = 2.0 * dist_c[skel_c]
    width_est = float(np.median(widths)) if widths.size else 0.0
    graph = graphify(skel_c, merge_distance=width_est)
    path_c = main_path(graph)
    dist = np.zeros(shape)
    dist[top:bottom, left:right] = dist_c
    skel = np.zeros(shape, dtype=bool)
    skel[top:bottom, left:right] = skel_c
    path = CapillaryPath(path_c.points + np.array([top, left]))
    return InstanceGeometry(dist, skel, graph, extend_tips(trim_tips(path, dist), dist), width_est)


def path_length(path: CapillaryPath, dist: np.ndarray) -> float:
    """Arc length of the ridge-centred path plus the sub-pixel tip remainders."""
    arc = float(cumulative_arc(ridge_centred(path.points, dist, LENGTH_SMOOTH))[-1])
    return arc + sum(tip_residuals(path, dist))


def analyze_image(img: np.ndarray, config: PipelineConfig = PipelineConfig(), mask: np.ndarray | None = None,
                  keypoints: list[KeypointSet] | None = None, name: str | None = None,
                  warnings: list[str] | None = None) -> dict:
    """Run the image pipeline and return the image-level report as a JSON-ready dict.

    ``mask`` replaces the native vesselness segmentation; ``keypoints``
    (ingested) replace native keypoint detection and carry optional class
    scores.
    """
    warnings = [] if warnings is None else warnings
    img = check_gray(img)
    std, degenerate = standardize(img, config.preprocess.p_low, config.preprocess.p_high)
    if degenerate:
        warnings.append("image is constant; standardization is degenerate")
    if mask is None:
        if config.segmentation.backend == "external":
            raise InvalidInputError("segmentation.backend is 'external' but no mask was given")
        mask = segment(std, config.segmentation.vesselness())
    elif mask.shape != img.shape:
        # same message as a file-backed external mask
        raise InvalidInputError(f"mask is {mask.shape[1]}x{mask.shape[0]} but the image is {img.shape[1]}x{img.shape[0]}")

    lo, hi = default_area_gates(img.shape)
    min_area = config.instances.min_area if config.instances.min_area is not None else lo
    max_area = config.instances.max_area if config.instances.max_area is not None else hi
    instances = extract_instances(mask, min_area, max_area)
    region = config.analysis.region(img.shape)
    clarity_filter(instances, std, config.instances.min_contrast, region)

    geometry: dict[int, InstanceGeometry] = {}
    for inst in instances:
        if not inst.kept:
            continue
        try:
            geometry[inst.id] = instance_geometry(inst, img.shape, config.instances.min_spur)
        except EmptyGraphError:
            inst.exclude("EmptySkeleton")

    if keypoints is None:
        kps = []
        for inst in instances:
            if not inst.kept:
                continue
            try:
                kps.append(detect_keypoints(geometry[inst.id].path, geometry[inst.id].dist, inst.id))
            except InvalidLoopOrientation:
                inst.exclude("InvalidLoopOrientation")
    else:
        kps = list(keypoints)
    pairs, unassigned = match(kps, instances, config.analysis.match_dilation)
    if keypoints is not None and unassigned:
        warnings.append(f"{len(unassigned)} ingested keypoint set(s) matched no capillary")

    by_id = {inst.id: inst for inst in instances}
    measurements = []
    for iid, kp in pairs:
        geo = geometry[iid]
        try:
            diam = measure_diameters(kp, geo.dist, geo.path)
        except KeypointOffPath:
            by_id[iid].exclude("KeypointOffPath")
            continue
        morph = classify(geo.graph, geo.path, config.analysis.tau_tortuous, kp.scores)
        measurements.append(CapillaryMeasurement(
            iid, kp, diam.apical, diam.arterial, diam.venous, path_length(geo.path, geo.dist), morph,
            tortuosity_index(geo.path), config.scale))

    n_total = len(instances)
    kept_ids = {m.instance_id for m in measurements}
    dens = density([m.keypoints.apex for m in measurements], region, config.scale)
    feats = aggregate(measurements, n_total, n_total - len(kept_ids), config.analysis.min_clear, dens, config.scale)
    features = {
        "crossing_portion": feats.crossing_portion,
        "tortuous_portion": feats.tortuous_portion,
        "normal_portion": feats.normal_portion,
        "density_per_mm": feats.density_per_mm,
    }
    for f in ("apical", "arterial", "venous", "length"):
        features[f] = feats.mean_um[f]
        features[f"{f}_px"] = feats.mean_px[f]
    flags = diagnose(features, config.ranges)
    return {
        "schema": IMAGE_SCHEMA,
        "image": name,
        "n_total": feats.n_total,
        "n_kept": feats.n_kept,
        "n_excluded": feats.n_excluded,
        "features": {k: encode_value(v) for k, v in features.items()},
        "flags": encode_flags(flags),
        "capillaries": [_capillary_record(m, by_id[m.instance_id]) for m in measurements],
        "excluded": [{"id": inst.id, "reason": inst.reason, "bbox": list(map(int, inst.bbox)),
                      "clarity": round(inst.clarity_score, 6)}
                     for inst in instances if inst.id not in kept_ids],
        "warnings": list(warnings),
    }


def _capillary_record(m: CapillaryMeasurement, inst: CapillaryInstance) -> dict:
    kp = m.keypoints
    return {
        "id": m.instance_id,
        "bbox": list(map(int, inst.bbox)),
        "keypoints": {"apex": list(kp.apex), "arterial": list(kp.arterial), "venous": list(kp.venous),
                      "source": kp.source, "flags": list(kp.flags)},
        "morph": m.morph,
        "tortuosity_index": encode_value(m.tortuosity_index),
        "clarity": round(inst.clarity_score, 6),
        "px": {"apical": m.apical_px, "arterial": m.arterial_px, "venous": m.venous_px, "length": m.length_px},
        "um": {f: encode_value(m.microns(f)) for f in ("apical", "arterial", "venous", "length")},
    }


def native_source(keypoints) -> bool:
    return keypoints is None or all(k.source == NATIVE for k in keypoints)
