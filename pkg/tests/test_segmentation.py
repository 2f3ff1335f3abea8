import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage as ndi

from nailfold.imaging import InvalidInputError, standardize, write_mask
from nailfold.phantom import LoopSpec, synth_image
from nailfold.segmentation import (
    AREA_OUT_OF_RANGE,
    BLURRED,
    OUTSIDE_COUNTING_AREA,
    ExternalMask,
    Rect,
    VesselnessBackend,
    clarity_filter,
    default_area_gates,
    extract_instances,
    hessian_eigenvalues,
    ridge_response,
    segment,
    vesselness,
)


def _line_image(width=3, dark=True):
    img = np.full((41, 41), 0.8 if dark else 0.2)
    img[:, 19:19 + width] = 0.3 if dark else 0.7
    return img


def test_backend_validation():
    for kw in ({"scales": ()}, {"scales": (0.0,)}, {"threshold": 1.0}, {"threshold": 0.0}, {"beta": 0}):
        with pytest.raises(InvalidInputError):
            VesselnessBackend(**kw)


def test_constant_image_scores_zero():
    assert np.all(vesselness(np.full((20, 20), 0.4)) == 0)


def test_dark_line_argmax_on_line_columns():
    v = vesselness(_line_image())
    cols = set(np.argmax(v[10:30], axis=1))
    assert cols <= {19, 20, 21}
    assert np.all(np.argmax(v[10:30], axis=1) == 20)


def test_bright_line_is_gated_out():
    v = vesselness(_line_image(dark=False))
    assert np.all(v[:, 19:22] == 0)


def test_hessian_matches_finite_differences():
    img = _line_image()
    # stencil error shrinks like 1/sigma^2, so use the coarsest default scale
    sigma = 5.0
    smooth = ndi.gaussian_filter(img, sigma, mode="nearest")
    # three-point second differences of the smoothed image approximate the Gaussian derivatives
    hrr = (np.roll(smooth, -1, 0) - 2 * smooth + np.roll(smooth, 1, 0)) * sigma**2
    hcc = (np.roll(smooth, -1, 1) - 2 * smooth + np.roll(smooth, 1, 1)) * sigma**2
    d_r = (np.roll(smooth, -1, 0) - np.roll(smooth, 1, 0)) / 2
    hrc = (np.roll(d_r, -1, 1) - np.roll(d_r, 1, 1)) / 2 * sigma**2
    l1, l2 = hessian_eigenvalues(img, sigma)
    tr = hrr + hcc
    det = hrr * hcc - hrc**2
    inner = (slice(8, 33), slice(8, 33))
    scale = np.abs(tr[inner]).max()
    assert np.allclose((l1 + l2)[inner], tr[inner], atol=0.05 * scale)
    assert np.allclose((l1 * l2)[inner], det[inner], atol=0.05 * scale**2)
    assert np.all(np.abs(l1) <= np.abs(l2))


def test_ridge_response_formula_point():
    l1, l2 = np.array([0.02]), np.array([0.2])
    beta, c = 0.5, 0.1
    expected = np.exp(-(0.1**2) / (2 * beta**2)) * (1 - np.exp(-(0.02**2 + 0.2**2) / (2 * c**2)))
    assert ridge_response(l1, l2, beta, c)[0] == pytest.approx(expected, rel=1e-12)
    assert ridge_response(l1, -l2, beta, c)[0] == 0.0


def test_vesselness_affine_invariant_argmax():
    img = _line_image()
    a = vesselness(img)
    b = vesselness(0.5 * img + 0.2)
    assert np.array_equal(np.argmax(a[10:30], axis=1), np.argmax(b[10:30], axis=1))


def test_segment_phantom_coverage():
    spec = LoopSpec(apex_center=(40, 100), limb_length=90, limb_spacing=30, noise_sigma=0.02, seed=4)
    img, truth = synth_image([spec], (200, 160))
    std, _ = standardize(img)
    mask = segment(std)
    tube = truth.mask
    assert (mask & tube).sum() / tube.sum() >= 0.8
    assert (mask & ~tube).sum() / (~tube).sum() <= 0.05


def test_external_mask_empty_and_mismatch(tmp_path):
    write_mask(tmp_path / "m.png", np.zeros((10, 12), bool))
    assert not segment(np.zeros((10, 12)), ExternalMask(str(tmp_path / "m.png"))).any()
    with pytest.raises(InvalidInputError, match="12x10.*13x10"):
        segment(np.zeros((10, 13)), ExternalMask(str(tmp_path / "m.png")))


def test_external_round_trip_idempotent(tmp_path, rng):
    m = rng.random((20, 25)) > 0.5
    write_mask(tmp_path / "a.png", m)
    once = segment(np.zeros(m.shape), ExternalMask(str(tmp_path / "a.png")))
    write_mask(tmp_path / "b.png", once)
    twice = segment(np.zeros(m.shape), ExternalMask(str(tmp_path / "b.png")))
    assert np.array_equal(once, m) and np.array_equal(twice, once)


def test_extract_instances_examples():
    assert extract_instances(np.zeros((10, 10), bool), 50, 1000) == []
    m = np.zeros((30, 30), bool)
    m[2:12, 15:25] = True
    m[15:25, 2:12] = True
    inst = extract_instances(m, 50, 1000)
    assert [i.id for i in inst] == [0, 1]
    assert inst[0].bbox == (2, 15, 11, 24) and all(i.kept for i in inst)
    small = np.zeros((10, 10), bool)
    small[0, :10] = True
    (only,) = extract_instances(small, 50, 1000)
    assert only.reason == AREA_OUT_OF_RANGE


def test_extract_instances_rejects_bad_gates():
    with pytest.raises(InvalidInputError):
        extract_instances(np.zeros((3, 3), bool), 10, 10)


@given(arrays(bool, (16, 16)), st.integers(1, 6), st.integers(7, 300))
def test_instances_partition_foreground(mask, lo, hi):
    inst = extract_instances(mask, lo, hi)
    cover = np.zeros(mask.shape, int)
    for i in inst:
        cover[i.pixels[:, 0], i.pixels[:, 1]] += 1
        assert (i.reason is None) == i.kept
        r0, c0, r1, c1 = i.bbox
        assert (r0, c0, r1, c1) == (i.pixels[:, 0].min(), i.pixels[:, 1].min(),
                                    i.pixels[:, 0].max(), i.pixels[:, 1].max())
    assert np.array_equal(cover, mask.astype(int))
    keys = [i.bbox[:2] for i in inst]
    assert keys == sorted(keys)


def test_clarity_blur_and_roi():
    spec = LoopSpec(apex_center=(30, 60), limb_length=50, noise_sigma=0.0)
    img, truth = synth_image([spec], (120, 100))
    blurred = ndi.gaussian_filter(img, 4)
    sharp = extract_instances(truth.mask, 10, 1e6)
    soft = extract_instances(truth.mask, 10, 1e6)
    clarity_filter(sharp, img, 0.0)
    clarity_filter(soft, blurred, 0.0)
    assert soft[0].clarity_score < sharp[0].clarity_score

    flat = extract_instances(truth.mask, 10, 1e6)
    clarity_filter(flat, np.full(img.shape, 0.5), 1e-9)
    assert flat[0].reason == BLURRED and flat[0].clarity_score == 0

    right = extract_instances(truth.mask, 10, 1e6)
    clarity_filter(right, img, 0.0, Rect(0, 100, 100, 120))
    assert right[0].reason == OUTSIDE_COUNTING_AREA


def test_clarity_roi_must_fit():
    with pytest.raises(InvalidInputError):
        clarity_filter([], np.zeros((10, 10)), 0.02, Rect(0, 0, 11, 10))


def test_area_gates_scale_with_area():
    assert default_area_gates((768, 1024)) == (80, 20000)
    lo, hi = default_area_gates((384, 512))
    assert (lo, hi) == (20, 5000)
