"""Command line: analyze-image, analyze-video, synth, eval, batch.

Exit codes: 0 success, 2 invalid input, 3 internal error. Outputs are
computed in full before anything is written, and each file is written
through a temporary sibling plus rename.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import tempfile
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .capillary import ingest_keypoints
from .config import PipelineConfig
from .flow import FrameSequence, analyze_video, read_video, stabilize
from .imaging import InvalidInputError, ScaleConfig, read_gray, read_mask, standardize, to_uint8
from .phantom import LoopSpec, TransitSpec, synth_image, synth_video
from .pipeline import analyze_image, instance_geometry
from .report import build_subject_report, classification_metrics, detection_sensitivity, pixel_sensitivity, \
    regression_metrics
from .segmentation import ExternalMask, clarity_filter, default_area_gates, extract_instances, segment

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 2, 3
VIDEO_SCHEMA = "anfc-video-report/1"
METRICS_SCHEMA = "anfc-metrics/1"
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")

log = logging.getLogger("nailfold")


# --- output ----------------------------------------------------------------------

def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, fixed indent, no NaN/Infinity tokens."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable, allow_nan=False) + "\n"


def _atomic(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    _atomic(path, lambda tmp: Path(tmp).write_text(text))


def write_png(path, arr8: np.ndarray) -> None:
    _atomic(path, lambda tmp: Image.fromarray(arr8).save(tmp, format="PNG"))


def write_outputs(files: dict) -> None:
    """``{path: str | uint8 array}``, everything already computed."""
    for path, content in files.items():
        if isinstance(content, str):
            write_text(path, content)
        else:
            write_png(path, content)


# --- commands --------------------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _image_report(image_path: Path, cfg: PipelineConfig, mask_path=None, keypoints_path=None) -> dict:
    warnings: list[str] = []
    img = read_gray(image_path)
    mask = ExternalMask(str(mask_path)).load(img.shape) if mask_path else None
    kps = None
    if keypoints_path:
        kps, kp_warn = ingest_keypoints(str(keypoints_path), img.shape)
        warnings.extend(kp_warn)
    report = analyze_image(img, cfg, mask=mask, keypoints=kps, name=image_path.name, warnings=warnings)
    report["config"] = cfg.to_dict()
    return report


def _emit_warnings(warnings) -> None:
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_analyze_image(args) -> int:
    cfg = _config(args)
    report = _image_report(Path(args.image), cfg, args.mask, args.keypoints)
    _emit_warnings(report["warnings"])
    write_outputs({Path(args.out): dumps(report)})
    return EXIT_OK


def _pick_instance(instances, wanted):
    kept = [i for i in instances if i.kept]
    if wanted is not None:
        match = [i for i in instances if i.id == wanted]
        if not match:
            raise InvalidInputError(f"no capillary instance with id {wanted} (found {len(instances)})")
        if not match[0].kept:
            raise InvalidInputError(f"instance {wanted} is excluded ({match[0].reason})")
        return match[0]
    if not kept:
        raise InvalidInputError("no kept capillary instance to analyze")
    return min(kept, key=lambda i: (-i.area, i.id))


def video_report(seq: FrameSequence, cfg: PipelineConfig, mask=None, instance=None, warnings=None,
                 name: str | None = None) -> dict:
    """Flow analysis on the main path of one capillary (largest kept instance by default)."""
    warnings = [] if warnings is None else warnings
    scale = ScaleConfig(cfg.scale.microns_per_pixel, seq.fps)
    fl = cfg.flow
    stab = stabilize(seq, fl.n_corners, fl.search_radius)
    if stab[1].any():
        warnings.append(f"{int(stab[1].sum())} frame(s) stabilized with low confidence")
    mean_frame, degenerate = standardize(stab[2].frames.mean(axis=0), cfg.preprocess.p_low, cfg.preprocess.p_high)
    if degenerate:
        warnings.append("mean frame is constant; standardization is degenerate")
    if mask is None:
        mask = segment(mean_frame, cfg.segmentation.vesselness())
    elif mask.shape != seq.shape:
        raise InvalidInputError(f"mask is {mask.shape[1]}x{mask.shape[0]} but frames are {seq.shape[1]}x{seq.shape[0]}")
    # video frames are usually tight crops around one loop, so only the lower
    # area gate scales with frame size unless the config sets an upper one
    lo, _ = default_area_gates(seq.shape)
    hi = cfg.instances.max_area or float(seq.shape[0] * seq.shape[1])
    instances = extract_instances(mask, cfg.instances.min_area or lo, hi)
    clarity_filter(instances, mean_frame, cfg.instances.min_contrast)
    inst = _pick_instance(instances, instance)
    geo = instance_geometry(inst, seq.shape, cfg.instances.min_spur)
    res = analyze_video(seq, geo.path, geo.dist, fl, scale, stabilization=stab)
    mean_um = res.mean_speed_px_per_frame * scale.microns_per_pixel * scale.fps \
        if res.mean_speed_px_per_frame is not None and scale.microns_per_pixel is not None else None
    out = res.to_json()
    out.update({
        "schema": VIDEO_SCHEMA,
        "video": name,
        "fps": seq.fps,
        "n_frames": len(seq),
        "instance": inst.id,
        "path_length_px": int(res.profile.values.shape[1]),
        "mean_speed_um_per_s": mean_um,
        "warnings": list(warnings),
        "config": cfg.to_dict(),
    })
    return out


def cmd_analyze_video(args) -> int:
    cfg = _config(args)
    warnings: list[str] = []
    seq = read_video(args.video, warnings)
    mask = ExternalMask(args.mask).load(seq.shape) if args.mask else None
    report = video_report(seq, cfg, mask, args.instance, warnings, Path(args.video).name)
    _emit_warnings(report["warnings"])
    write_outputs({Path(args.out): dumps(report)})
    return EXIT_OK


# --- synth -----------------------------------------------------------------------

_IMAGE_KEYS = {"kind", "canvas", "loops", "allow_overlap"}
_VIDEO_KEYS = {"kind", "canvas", "loop", "transits", "n_frames", "fps", "jitter", "texture"}


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidInputError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidInputError(f"{where}: unknown key {unknown[0]!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidInputError(f"{where}: {exc}") from exc


def synth_outputs(spec: dict, out_dir: Path, seed: int | None = None) -> dict:
    """Render a phantom spec into ``{path: content}`` without touching the disk."""
    if not isinstance(spec, dict) or spec.get("kind") not in ("image", "video"):
        raise InvalidInputError("synth spec needs \"kind\": \"image\" or \"video\"")
    keys = _IMAGE_KEYS if spec["kind"] == "image" else _VIDEO_KEYS
    unknown = sorted(set(spec) - keys)
    if unknown:
        raise InvalidInputError(f"synth spec: unknown key {unknown[0]!r}")
    canvas = tuple(spec.get("canvas", (256, 192)))
    if len(canvas) != 2:
        raise InvalidInputError("canvas must be [width, height]")
    files: dict = {}
    if spec["kind"] == "image":
        loops = [_strict(LoopSpec, d, f"loops[{i}]") for i, d in enumerate(spec.get("loops", []))]
        if seed is not None and loops:
            loops[0].seed = seed
        img, truth = synth_image(loops, canvas, bool(spec.get("allow_overlap", False)))
        files[out_dir / "image.png"] = to_uint8(img)
        files[out_dir / "mask.png"] = np.where(truth.mask, 255, 0).astype(np.uint8)
        files[out_dir / "truth.json"] = dumps(truth.to_json())
        return files
    loop = _strict(LoopSpec, spec.get("loop", {}), "loop")
    if seed is not None:
        loop.seed = seed
    transits = [_strict(TransitSpec, d, f"transits[{i}]") for i, d in enumerate(spec.get("transits", []))]
    fps = float(spec.get("fps", 20.0))
    frames, truth = synth_video(loop, transits, int(spec.get("n_frames", 200)), spec.get("jitter"), fps,
                                canvas, float(spec.get("texture", 0.0)))
    for t, frame in enumerate(frames):
        files[out_dir / "frames" / f"frame_{t + 1:06d}.png"] = to_uint8(frame)
    files[out_dir / "frames" / "meta.json"] = dumps({"fps": fps})
    files[out_dir / "mask.png"] = np.where(truth.mask, 255, 0).astype(np.uint8)
    files[out_dir / "truth.json"] = dumps(truth.to_json())
    return files


def _load_json(path, what: str):
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"no such {what}: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def cmd_synth(args) -> int:
    spec = _load_json(args.spec, "synth spec")
    write_outputs(synth_outputs(spec, Path(args.out), args.seed))
    return EXIT_OK


# --- eval ------------------------------------------------------------------------

SIZE_KEYS = {"apical": "apex_width", "arterial": "arterial_width", "venous": "venous_width", "length": "length"}


def _pair_loops(pred: dict, truth: dict, radius: float):
    """Greedy one-to-one pairing of reported capillaries with truth loops by apex distance."""
    caps, loops = pred.get("capillaries", []), truth.get("loops", [])
    cand = sorted((math.dist(c["keypoints"]["apex"], lp["apex"]), i, j)
                  for i, c in enumerate(caps) for j, lp in enumerate(loops))
    used_c, used_l, pairs = set(), set(), []
    for d, i, j in cand:
        if d <= radius and i not in used_c and j not in used_l:
            used_c.add(i)
            used_l.add(j)
            pairs.append((caps[i], loops[j]))
    return pairs, len(loops) - len(pairs)


def _check_schema(doc, schema, path):
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        found = doc.get("schema") if isinstance(doc, dict) else type(doc).__name__
        raise InvalidInputError(f"{path}: expected schema {schema}, found {found}")


def evaluate(mode: str, preds: list, truths: list, radius: float = 10.0) -> dict:
    """Metrics over pred/truth documents taken pairwise in order."""
    if len(preds) != len(truths):
        raise InvalidInputError(f"{len(preds)} prediction file(s) vs {len(truths)} truth file(s)")
    generic = {"regression": "values", "classification": "labels", "detection": "points"}.get(mode)
    if generic and all(isinstance(d, dict) and generic in d for _, d in preds + truths):
        p = [v for _, d in preds for v in d[generic]]
        t = [v for _, d in truths for v in d[generic]]
        if mode == "regression":
            mae, rmse = regression_metrics(p, t)
            return {"mode": mode, "n": len(t), "mae": mae, "rmse": rmse}
        if mode == "classification":
            return {"mode": mode, "n": len(t), **classification_metrics(p, t)}
        return {"mode": mode, "n": len(t), "sensitivity": detection_sensitivity(p, t, radius), "radius": radius}
    if mode == "segmentation":
        hits = total = 0
        for (pp, pm), (tp, tm) in zip(preds, truths):
            if pm.shape != tm.shape:
                raise InvalidInputError(f"{pp} and {tp} differ in size")
            total += int(tm.sum())
            hits += round(pixel_sensitivity(pm, tm) * int(tm.sum()))
        return {"mode": mode, "n_truth_pixels": total, "sensitivity": hits / total if total else 0.0}
    for (pp, pd), (tp, td) in zip(preds, truths):
        _check_schema(pd, "anfc-image-report/1", pp)
        _check_schema(td, "anfc-phantom-image/1", tp)
    if mode == "detection":
        found = total = 0
        for (_, pd), (_, td) in zip(preds, truths):
            pts = [c["keypoints"]["apex"] for c in pd.get("capillaries", [])]
            tpts = [lp["apex"] for lp in td.get("loops", [])]
            if tpts:
                found += round(detection_sensitivity(pts, tpts, radius) * len(tpts))
                total += len(tpts)
        return {"mode": mode, "n": total, "sensitivity": found / total if total else 0.0, "radius": radius}
    pairs, missed = [], 0
    for (_, pd), (_, td) in zip(preds, truths):
        pr, m = _pair_loops(pd, td, radius)
        pairs += pr
        missed += m
    out = {"mode": mode, "n_matched": len(pairs), "n_unmatched_truth": missed}
    if not pairs:
        raise InvalidInputError("no reported capillary lies within the match radius of a truth loop")
    if mode == "classification":
        out.update(classification_metrics([c["morph"] for c, _ in pairs], [lp["morph"] for _, lp in pairs]))
        return out
    for name, key in SIZE_KEYS.items():
        mae, rmse = regression_metrics([c["px"][name] for c, _ in pairs], [lp[key] for _, lp in pairs])
        out[name] = {"mae_px": mae, "rmse_px": rmse}
    return out


def _metrics_table(metrics: dict) -> str:
    rows = []
    for k, v in sorted(metrics.items()):
        if isinstance(v, dict) and all(not isinstance(x, (dict, list)) for x in v.values()):
            rows.append(f"{k:<20} " + "  ".join(f"{a}={b:.4g}" if isinstance(b, float) else f"{a}={b}"
                                                  for a, b in sorted(v.items())))
        elif not isinstance(v, (dict, list)):
            rows.append(f"{k:<20} {v:.4g}" if isinstance(v, float) else f"{k:<20} {v}")
    return "\n".join(rows)


def cmd_eval(args) -> int:
    if args.mode == "segmentation":
        preds = [(p, read_mask(p)) for p in args.pred]
        truths = [(p, read_mask(p)) for p in args.truth]
    else:
        preds = [(p, _load_json(p, "prediction")) for p in args.pred]
        truths = [(p, _load_json(p, "truth")) for p in args.truth]
    metrics = evaluate(args.mode, preds, truths, args.radius)
    metrics["schema"] = METRICS_SCHEMA
    print(_metrics_table(metrics))
    if args.out:
        write_outputs({Path(args.out): dumps(metrics)})
    return EXIT_OK


# --- batch -----------------------------------------------------------------------

def cmd_batch(args) -> int:
    cfg = _config(args)
    src = Path(args.input)
    if not src.is_dir():
        raise InvalidInputError(f"no such input directory: {src}")
    images = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise InvalidInputError(f"{src}: no images")
    mask_dir = Path(args.mask) if args.mask else None

    def run(p: Path) -> dict:
        mask = mask_dir / p.name if mask_dir else None
        return _image_report(p, cfg, mask if mask is not None and mask.is_file() else None)

    with ThreadPoolExecutor(max_workers=max(args.workers, 1)) as pool:
        reports = list(pool.map(run, images))  # map keeps input order
    for rep in reports:
        _emit_warnings(rep["warnings"])
    out = Path(args.out)
    files = {out / f"{p.stem}.json": dumps(rep) for p, rep in zip(images, reports)}
    files[out / "subject.json"] = dumps(build_subject_report(args.subject or src.name, reports, cfg.ranges))
    write_outputs(files)
    return EXIT_OK


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nailfold", description="Nailfold capillary image and video analysis.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze-image", help="image-level capillary report")
    p.add_argument("image")
    p.add_argument("--mask", help="external vessel mask (>= 128 is vessel)")
    p.add_argument("--keypoints", help="external keypoint JSON")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_image)

    p = sub.add_parser("analyze-video", help="WBC count and speed for one capillary")
    p.add_argument("video", help="frame directory or raw planar file with a .json sidecar")
    p.add_argument("--mask")
    p.add_argument("--instance", type=int, help="capillary instance id (default: largest kept)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_video)

    p = sub.add_parser("synth", help="render a phantom image or video from a JSON spec")
    p.add_argument("spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compare predictions with ground truth")
    p.add_argument("--mode", required=True, choices=("regression", "classification", "detection", "segmentation"))
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--radius", type=float, default=10.0, help="apex match radius in px")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("batch", help="analyze every image in a directory plus a subject report")
    p.add_argument("input")
    p.add_argument("--mask", help="directory of masks named like the images")
    p.add_argument("--subject")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_batch)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
