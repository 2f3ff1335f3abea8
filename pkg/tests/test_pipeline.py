import json

import numpy as np
import pytest

from nailfold.capillary import INGESTED, INSUFFICIENT_CLEAR, MISSING_SCALE, KeypointSet
from nailfold.config import PipelineConfig
from nailfold.imaging import InvalidInputError, ScaleConfig
from nailfold.phantom import LoopSpec, synth_image
from nailfold.pipeline import analyze_image

CANVAS = (512, 384)


def _phantom(noise=0.02):
    specs = [
        LoopSpec(apex_center=(100, 80), limb_length=120, arterial_width=7, venous_width=11, apex_width=12,
                 noise_sigma=noise, seed=11),
        LoopSpec(apex_center=(100, 200), limb_length=120, arterial_width=9, venous_width=9, apex_width=10),
        LoopSpec(apex_center=(100, 320), limb_length=120, crossing=True),
        LoopSpec(apex_center=(100, 440), limb_length=120, arterial_width=6, venous_width=13, apex_width=14),
    ]
    return synth_image(specs, CANVAS)


def _truth_keypoints(truth):
    return [KeypointSet(lp.apex, lp.arterial, lp.venous, INGESTED) for lp in truth.loops]


def _by_apex(report, truth):
    caps = {tuple(np.round(c["keypoints"]["apex"]).astype(int)): c for c in report["capillaries"]}
    return [caps[tuple(np.round(lp.apex).astype(int))] for lp in truth.loops]


def test_truth_mask_and_keypoints_recover_widths():
    img, truth = _phantom()
    rep = analyze_image(img, mask=truth.mask, keypoints=_truth_keypoints(truth))
    assert rep["n_kept"] == 4 and rep["n_excluded"] == 0
    for cap, lp in zip(_by_apex(rep, truth), truth.loops):
        assert cap["px"]["arterial"] == pytest.approx(lp.arterial_width, abs=1.0)
        assert cap["px"]["venous"] == pytest.approx(lp.venous_width, abs=1.0)
        assert cap["px"]["apical"] == pytest.approx(lp.apex_width, abs=2.0)
        assert cap["px"]["length"] == pytest.approx(lp.length, rel=0.02)
        assert cap["morph"] == lp.morph


def test_portions_and_pixel_means():
    img, truth = _phantom()
    rep = analyze_image(img, mask=truth.mask, keypoints=_truth_keypoints(truth))
    f = rep["features"]
    assert f["crossing_portion"] == 0.25 and f["tortuous_portion"] == 0.0 and f["normal_portion"] == 0.75
    px = [c["px"]["venous"] for c in rep["capillaries"]]
    assert f["venous_px"] == pytest.approx(np.mean(px))


def test_missing_scale_gives_reasoned_nulls():
    img, truth = _phantom()
    rep = analyze_image(img, mask=truth.mask, keypoints=_truth_keypoints(truth))
    for name in ("apical", "arterial", "venous", "length"):
        assert rep["features"][name] == {"value": None, "reason": MISSING_SCALE}
        assert rep["flags"][name] == {"value": None, "reason": MISSING_SCALE}


def test_micron_scale_converts():
    img, truth = _phantom()
    cfg = PipelineConfig(scale=ScaleConfig(microns_per_pixel=1.5))
    rep = analyze_image(img, cfg, mask=truth.mask, keypoints=_truth_keypoints(truth))
    f = rep["features"]
    assert f["venous"] == pytest.approx(1.5 * f["venous_px"])
    assert f["density_per_mm"] > 0
    assert rep["flags"]["venous"] in ("Normal", "Abnormal")


def test_native_route_finds_the_loops():
    img, truth = _phantom()
    rep = analyze_image(img)
    assert rep["n_kept"] >= 3
    apexes = np.array([c["keypoints"]["apex"] for c in rep["capillaries"]])
    for lp in truth.loops:
        assert np.min(np.hypot(*(apexes - lp.apex).T)) <= 10


def test_no_clear_capillaries_gives_insufficient_nulls():
    img = np.full((CANVAS[1], CANVAS[0]), 0.8)
    rep = analyze_image(img)
    assert rep["n_kept"] == 0
    for name in ("crossing_portion", "tortuous_portion", "apical_px", "venous_px", "length_px"):
        assert rep["features"][name] == {"value": None, "reason": INSUFFICIENT_CLEAR}
    assert any("constant" in w for w in rep["warnings"])


def test_fewer_than_min_clear_is_insufficient():
    img, truth = _phantom()
    cfg = PipelineConfig.from_dict({"analysis": {"min_clear": 5}})
    rep = analyze_image(img, cfg, mask=truth.mask, keypoints=_truth_keypoints(truth))
    assert rep["features"]["crossing_portion"] == {"value": None, "reason": INSUFFICIENT_CLEAR}


def test_counting_region_excludes_outside_loops():
    img, truth = _phantom()
    cfg = PipelineConfig.from_dict({"analysis": {"counting_region": [0, 0, 384, 260]}})
    rep = analyze_image(img, cfg, mask=truth.mask, keypoints=_truth_keypoints(truth))
    reasons = sorted(e["reason"] for e in rep["excluded"])
    assert rep["n_kept"] == 2 and "OutsideCountingArea" in reasons


def test_unmatched_ingested_keypoints_warn():
    img, truth = _phantom()
    kps = _truth_keypoints(truth) + [KeypointSet((10.0, 10.0), (30.0, 5.0), (30.0, 15.0), INGESTED)]
    rep = analyze_image(img, mask=truth.mask, keypoints=kps)
    assert any("matched no capillary" in w for w in rep["warnings"])


def test_external_backend_needs_mask_and_shape():
    img, truth = _phantom()
    cfg = PipelineConfig.from_dict({"segmentation": {"backend": "external"}})
    with pytest.raises(InvalidInputError):
        analyze_image(img, cfg)
    with pytest.raises(InvalidInputError, match="512x384"):
        analyze_image(img, mask=truth.mask[:100])


def test_report_is_deterministic_and_json_clean():
    img, truth = _phantom()
    a = json.dumps(analyze_image(img), sort_keys=True, allow_nan=False)
    b = json.dumps(analyze_image(img), sort_keys=True, allow_nan=False)
    assert a == b
