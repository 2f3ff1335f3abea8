import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nailfold.capillary import CROSSING_CLASS, NORMAL, TORTUOUS
from nailfold.imaging import InvalidInputError, bilinear_sample, distance_transform
from nailfold.phantom import LoopSpec, TransitSpec, centerline, loop_class, synth_image, synth_video
from nailfold.pipeline import instance_geometry, path_length
from nailfold.segmentation import extract_instances
from nailfold.skeleton import ENDPOINT, graphify, prune, thin


def test_loopspec_validation():
    for kw in ({"arterial_width": 1.5}, {"intensity": 0.9}, {"limb_spacing": 8.0}, {"limb_length": 0},
               {"noise_sigma": -0.1}):
        with pytest.raises(InvalidInputError):
            LoopSpec(**kw)
    with pytest.raises(InvalidInputError):
        TransitSpec(0.0)
    with pytest.raises(InvalidInputError):
        TransitSpec(1.0, direction="up")


def test_noise_free_loop_has_two_endpoints():
    img, truth = synth_image([LoopSpec(apex_center=(30, 80), limb_length=70)], (160, 130))
    g = graphify(prune(thin(truth.mask), 8))
    assert g.count(ENDPOINT) == 2


def test_classes_by_construction():
    assert loop_class(LoopSpec(crossing=True)) == CROSSING_CLASS
    assert loop_class(LoopSpec()) == NORMAL
    tort = LoopSpec(limb_length=160, limb_spacing=56, arterial_width=6, venous_width=6, apex_width=6,
                    tortuosity_amp=36, tortuosity_period=80)
    assert loop_class(tort) == TORTUOUS


def test_image_determinism_and_seed():
    spec = LoopSpec(noise_sigma=0.05, seed=3)
    a, _ = synth_image([spec])
    b, _ = synth_image([spec])
    c, _ = synth_image([LoopSpec(noise_sigma=0.05, seed=4)])
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_overlap_and_canvas_checks():
    a = LoopSpec(apex_center=(30, 60))
    with pytest.raises(InvalidInputError, match="overlap"):
        synth_image([a, LoopSpec(apex_center=(35, 70))], (256, 192))
    synth_image([a, LoopSpec(apex_center=(35, 70))], (256, 192), allow_overlap=True)
    with pytest.raises(InvalidInputError, match="canvas"):
        synth_image([LoopSpec(apex_center=(30, 5))])


def test_truth_json_round_trips():
    _, truth = synth_image([LoopSpec()])
    doc = json.loads(json.dumps(truth.to_json()))
    assert doc["loops"][0]["morph"] == NORMAL and doc["loops"][0]["apex_width"] == 10.0


@given(st.floats(40, 120), st.floats(24, 40), st.floats(5, 12), st.floats(0, 1), st.floats(0, 1))
def test_truth_length_matches_skeleton(limb, spacing, width, dr, dc):
    spec = LoopSpec(apex_center=(20 + dr, 70 + dc), limb_length=limb, limb_spacing=max(spacing, width + 6),
                    arterial_width=width, venous_width=width, apex_width=width)
    _, truth = synth_image([spec], (150, 175))
    (inst,) = extract_instances(truth.mask, 10, 1e6)
    geo = instance_geometry(inst, truth.mask.shape)
    assert path_length(geo.path, geo.dist) == pytest.approx(truth.loops[0].length, rel=0.01)


def _limb_widths(width, dr, dc):
    spec = LoopSpec(apex_center=(20 + dr, 60 + dc), limb_length=60, limb_spacing=width + 14,
                    arterial_width=width, venous_width=width, apex_width=width)
    _, truth = synth_image([spec], (130, 130))
    dist = distance_transform(truth.mask)
    cl = centerline(spec)
    rows = cl.points[:, 0]
    straight = (rows > spec.apex_center[0] + spec.radius + 15) & (rows < rows.max() - 15)
    pts = cl.points[straight]
    return 2 * bilinear_sample(dist, pts[:, 0], pts[:, 1])


@given(st.integers(2, 7), st.floats(0, 1), st.floats(0, 1))
def test_rendered_width_exact_for_even_widths(half, dr, dc):
    assert np.all(np.abs(_limb_widths(2 * half, dr, dc) - 2 * half) <= 0.5)


@given(st.floats(4, 14), st.floats(0, 1), st.floats(0, 1))
def test_rendered_width_within_pixel_quantization(width, dr, dc):
    # the nearest background pixel centre lies between w/2 and w/2 + 1 from the axis,
    # and the sampled pixel may sit up to half a pixel off it
    err = _limb_widths(width, dr, dc) - width
    assert np.all(err >= -1.0 - 1e-9) and np.all(err < 2.0)


def test_video_static_frames_identical():
    frames, truth = synth_video(LoopSpec(), [], 5)
    assert all(np.array_equal(frames[0], f) for f in frames[1:])
    assert frames.shape == (5, 160, 160) and truth.fps == 20.0


def test_video_mid_crossing_arithmetic():
    spec = LoopSpec()
    L = centerline(spec).length
    _, truth = synth_video(spec, [TransitSpec(1.0, start_frame=10)], int(L / 2) + 20)
    assert truth.mid_crossing_frame(0) == pytest.approx(10 + L / 2)
    assert truth.to_json()["transits"][0]["mid_crossing_frame"] == pytest.approx(10 + L / 2)


def test_video_determinism():
    spec = LoopSpec(noise_sigma=0.05, seed=9)
    jit = [(0, 0), (1.5, -0.5), (-2, 3)]
    start = 1 - centerline(spec).length / 4
    a, _ = synth_video(spec, [TransitSpec(2.0, start_frame=start)], 3, jitter=jit, texture=0.1)
    b, _ = synth_video(spec, [TransitSpec(2.0, start_frame=start)], 3, jitter=jit, texture=0.1)
    assert np.array_equal(a, b)


def test_video_blob_follows_centerline():
    spec = LoopSpec()
    frames, truth = synth_video(spec, [TransitSpec(2.0, start_frame=0)], 60)
    static, _ = synth_video(spec, [], 2)
    diff = frames[20] - static[0]
    r, c = np.unravel_index(np.argmax(diff), diff.shape)
    assert np.hypot(*(truth.centerline.at(40.0) - (r, c))) <= 1.0


def test_video_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        synth_video(LoopSpec(), [], 1)
    with pytest.raises(InvalidInputError, match="jitter"):
        synth_video(LoopSpec(), [], 3, jitter=[(0, 0)])
    with pytest.raises(InvalidInputError, match="outside the video"):
        synth_video(LoopSpec(), [TransitSpec(1.0, start_frame=500)], 50)
