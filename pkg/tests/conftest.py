"""Shared oracles and fixtures."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def brute_force_edt(mask: np.ndarray) -> np.ndarray:
    """Distance from every foreground pixel to the nearest background pixel, pixels
    outside the image counting as background. O(N^2) on purpose."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    bg = [(r, c) for r in range(-1, h + 1) for c in range(-1, w + 1)
          if not (0 <= r < h and 0 <= c < w) or not mask[r, c]]
    bg = np.array(bg, dtype=np.float64)
    out = np.zeros((h, w))
    for r, c in zip(*np.nonzero(mask)):
        out[r, c] = np.sqrt(((bg - (r, c)) ** 2).sum(axis=1).min())
    return out


def label_count(mask: np.ndarray) -> int:
    from scipy import ndimage as ndi
    return int(ndi.label(mask, structure=np.ones((3, 3)))[1])


def tube_mask(shape, points, radius: float) -> np.ndarray:
    """Union of discs along a polyline, sampled densely (an independent tube renderer)."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    out = np.zeros(shape, dtype=bool)
    pts = np.asarray(points, dtype=np.float64)
    for a, b in zip(pts[:-1], pts[1:]):
        n = int(np.ceil(np.hypot(*(b - a)) * 2)) + 1
        for t in np.linspace(0.0, 1.0, n):
            p = a + t * (b - a)
            out |= (rr - p[0]) ** 2 + (cc - p[1]) ** 2 <= radius ** 2
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# PASS/FAIL lines from tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria with PASS/FAIL lines")
