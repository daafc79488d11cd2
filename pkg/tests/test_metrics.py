import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import luma, naive_ssim

from crossview.core import DimensionMismatch, Image
from crossview.metrics import (
    PSNR_CAP_DB,
    MetricReport,
    TooFewSamples,
    gradient_magnitude,
    kid,
    psnr,
    sharpness_difference,
    ssim,
    ssim_map,
)


def img(px):
    return Image(np.asarray(px, float))


def test_ssim_identity_and_constants():
    rng = np.random.default_rng(0)
    x = img(rng.random((32, 32, 3)))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    zero, one = img(np.zeros((16, 16, 1))), img(np.ones((16, 16, 1)))
    c1 = 0.01**2
    assert ssim(zero, one) == pytest.approx(c1 / (1 + c1), abs=1e-12)


def test_ssim_matches_naive_windows():
    rng = np.random.default_rng(1)
    a, b = rng.random((20, 24, 3)), rng.random((20, 24, 3))
    assert ssim(img(a), img(b)) == pytest.approx(naive_ssim(luma(a), luma(b)), abs=1e-10)
    assert ssim_map(img(a), img(b)).shape == (10, 14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ssim_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = img(rng.random((12, 13, 1))), img(rng.random((12, 13, 1)))
    s = ssim(a, b)
    assert -1 <= s <= 1
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_continuity():
    x = np.random.default_rng(2).uniform(0.1, 0.9, (16, 16, 3))
    assert ssim(img(x), img(x + 1e-6)) >= 0.9999


def test_ssim_too_small():
    with pytest.raises(DimensionMismatch):
        ssim(img(np.zeros((10, 20, 1))), img(np.zeros((10, 20, 1))))
    with pytest.raises(DimensionMismatch):
        ssim(img(np.zeros((12, 12, 1))), img(np.zeros((12, 13, 1))))


def test_psnr_values():
    a = img(np.zeros((4, 4, 3)))
    assert psnr(a, img(np.full((4, 4, 3), 0.5))) == pytest.approx(20 * math.log10(2), abs=1e-12)
    assert psnr(a, a) == PSNR_CAP_DB


def test_sharpness_difference():
    ramp = np.tile(np.linspace(0, 1, 8), (8, 1))[:, :, None]
    flat = np.full((8, 8, 1), 0.5)
    assert sharpness_difference(img(ramp), img(ramp)) == PSNR_CAP_DB
    g = gradient_magnitude(ramp[:, :, 0])
    assert g.shape == (7, 7)
    mse = np.mean(g**2)
    assert sharpness_difference(img(ramp), img(flat)) == pytest.approx(10 * math.log10(1 / mse))


def _kid_double_sum(x, y):
    def k(a, b):
        return (a @ b / len(a) + 1) ** 3

    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    if m == n:
        sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    else:
        sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def test_kid_matches_double_sum():
    rng = np.random.default_rng(3)
    x, y, z = rng.standard_normal((7, 5)), rng.standard_normal((7, 5)) + 0.3, rng.standard_normal((9, 5))
    assert kid(x, y) == pytest.approx(_kid_double_sum(x, y), rel=1e-12)
    assert kid(x, z) == pytest.approx(_kid_double_sum(x, z), rel=1e-12)


def test_kid_identical_sets_is_zero():
    x = np.random.default_rng(4).standard_normal((20, 16))
    assert abs(kid(x, x.copy())) <= 1e-9


def test_kid_grows_with_shift():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((200, 8))
    near = kid(x, rng.standard_normal((200, 8)) + 0.1)
    far = kid(x, rng.standard_normal((200, 8)) + 1.0)
    assert far > near


def test_kid_input_checks():
    with pytest.raises(TooFewSamples):
        kid(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(DimensionMismatch):
        kid(np.zeros((4, 3)), np.zeros((4, 2)))


def test_report_aggregates():
    rng = np.random.default_rng(6)
    rep = MetricReport()
    for name in ("b", "a"):
        rep.add(name, img(rng.random((16, 16, 3))), img(rng.random((16, 16, 3))))
    d = rep.as_dict()
    assert d["count"] == 2 and list(d["per_image"]) == ["a", "b"]
    assert d["mean"]["ssim"] == pytest.approx(np.mean([r["ssim"] for r in rep.per_image.values()]))
