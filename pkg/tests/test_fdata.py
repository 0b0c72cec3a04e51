import math

import numpy as np
import pytest

from faeclust.errors import (
    BasisMismatch,
    DegenerateVarianceWarning,
    InvalidBasisConfig,
    InvalidSamplePath,
    OutOfDomain,
)
from faeclust.fdata import (
    FunctionalDataset,
    FunctionalSample,
    SamplePath,
    build_basis,
    evaluate,
    inner_product,
    smooth,
    smooth_all,
    standardize,
)


def _dense_integral(fvals, grid):
    return np.trapezoid(fvals, grid)


def test_cubic_bernstein_gram_entry():
    b = build_basis("bspline", 4, 3, (0.0, 1.0))
    # B_0(t) = (1 - t)^3, integral of (1 - t)^6 over [0, 1] is 1/7
    assert b.gram[0, 0] == pytest.approx(1 / 7, abs=1e-12)


def test_fourier_gram_is_identity():
    b = build_basis("fourier", 3, 0, (0.0, 2 * math.pi))
    np.testing.assert_allclose(b.gram, np.eye(3), atol=1e-10)


@pytest.mark.parametrize("m", [4, 9])
def test_penalty_annihilates_constants_and_lines(m):
    b = build_basis("bspline", m, 3, (0.0, 1.0))
    np.testing.assert_allclose(b.penalty.sum(axis=1), 0.0, atol=1e-8)
    # coefficients of f(t) = t via least squares on a fine grid
    t = np.linspace(0, 1, 50)
    c, *_ = np.linalg.lstsq(b.evaluate(t), t, rcond=None)
    assert np.linalg.norm(b.penalty @ c) < 1e-8


def test_basis_invariants():
    b = build_basis("bspline", 12, 3, (0.0, 2.0))
    assert np.allclose(b.gram, b.gram.T)
    assert np.linalg.eigvalsh(b.gram / np.abs(b.gram).max()).min() > 1e-12
    assert np.linalg.eigvalsh(b.penalty).min() > -1e-8
    # quadrature is exact for degree 2*degree polynomials
    x = b.quad_nodes
    assert np.sum(b.quad_weights * x ** 6) == pytest.approx(2.0 ** 7 / 7, rel=1e-10)


def test_build_basis_errors():
    with pytest.raises(InvalidBasisConfig):
        build_basis("bspline", 3, 3)
    with pytest.raises(InvalidBasisConfig):
        build_basis("bspline", 8, 3, (1.0, 1.0))
    with pytest.raises(InvalidBasisConfig):
        build_basis("wavelet", 8)


def test_smooth_reproduces_line():
    b = build_basis("bspline", 8, 3)
    t = np.linspace(0, 1, 10)
    s = smooth(SamplePath(0, t, t), b, lambda_s=0.0)
    np.testing.assert_allclose(evaluate(s, t)[0], t, atol=1e-8)


def test_smooth_large_penalty_gives_linear_fit():
    rng = np.random.default_rng(1)
    b = build_basis("bspline", 10, 3)
    t = np.linspace(0, 1, 40)
    y = np.sin(5 * t) + rng.normal(0, 0.1, 40)
    s = smooth(SamplePath(0, t, y), b, lambda_s=1e9)
    line = np.polyval(np.polyfit(t, y, 1), t)
    np.testing.assert_allclose(evaluate(s, t)[0], line, atol=1e-3)


def test_smooth_sine_against_dense_least_squares():
    rng = np.random.default_rng(7)
    b = build_basis("bspline", 12, 3)
    t = np.linspace(0, 1, 50)
    y = np.sin(2 * np.pi * t) + rng.normal(0, 0.05, 50)
    s = smooth(SamplePath(0, t, y), b, lambda_s=1e-4)
    # oracle: normal equations solved directly
    B = b.evaluate(t)
    c = np.linalg.solve(B.T @ B + 1e-4 * b.penalty, B.T @ y)
    np.testing.assert_allclose(s.coeffs[0], c, atol=1e-8)
    grid = np.linspace(0, 1, 400)
    assert np.max(np.abs(evaluate(s, grid)[0] - np.sin(2 * np.pi * grid))) < 0.05


def test_sample_path_validation():
    b = build_basis("bspline", 6, 3)
    bad = SamplePath(3, [0.0, 0.2, 0.1, 0.5, 0.9], np.zeros(5))
    with pytest.raises(InvalidSamplePath, match="subject 3"):
        smooth(bad, b)
    with pytest.raises(InvalidSamplePath):
        smooth(SamplePath(1, [0.0, 0.5, 1.0], np.zeros(3)), b)
    with pytest.raises(InvalidSamplePath):
        smooth(SamplePath(1, np.linspace(0, 2, 6), np.zeros(6)), b)
    with pytest.raises(InvalidSamplePath):
        smooth(SamplePath(1, np.linspace(0, 1, 6), [0, 1, np.nan, 0, 0, 0]), b)


def test_gram_identity_random_coefficients():
    rng = np.random.default_rng(0)
    for kind, m in [("bspline", 15), ("fourier", 7)]:
        b = build_basis(kind, m, 3)
        c = rng.normal(size=m)
        f = b.quad_values @ c
        assert np.sum(b.quad_weights * f * f) == pytest.approx(c @ b.gram @ c, rel=1e-8)


def test_evaluate_cases():
    b = build_basis("fourier", 5, 0, (0.0, 2.0))
    s = FunctionalSample(0, np.eye(5)[:1], b)
    np.testing.assert_allclose(evaluate(s, [0.0, 0.7, 2.0]), 1 / math.sqrt(2.0))
    z = FunctionalSample(0, np.zeros((2, 5)), b)
    assert np.all(evaluate(z, [0.1, 0.2]) == 0)
    with pytest.raises(OutOfDomain):
        evaluate(s, [2.5])


def test_inner_product_cases():
    b = build_basis("fourier", 3, 0)
    assert inner_product(np.eye(3)[1], np.eye(3)[2], b) == pytest.approx(0.0, abs=1e-12)
    assert inner_product(np.eye(3)[1], np.eye(3)[1], b) == pytest.approx(1.0, abs=1e-10)
    rng = np.random.default_rng(3)
    bs = build_basis("bspline", 10, 3)
    f, g = rng.normal(size=10), rng.normal(size=10)
    grid = np.linspace(0, 1, 10_000)
    B = bs.evaluate(grid)
    assert inner_product(f, g, bs) == pytest.approx(_dense_integral((B @ f) * (B @ g), grid), abs=1e-6)
    with pytest.raises(BasisMismatch):
        inner_product(np.ones(4), np.ones(10), bs)


def test_standardize_two_constants():
    b = build_basis("bspline", 6, 3)
    one = np.linalg.lstsq(b.quad_values, np.ones(len(b.quad_nodes)), rcond=None)[0]
    ds = FunctionalDataset([FunctionalSample(0, 0 * one[None], b), FunctionalSample(1, 2 * one[None], b)], b)
    out = standardize(ds)
    grid = np.linspace(0, 1, 7)
    np.testing.assert_allclose(evaluate(out.samples[0], grid), -1.0, atol=1e-8)
    np.testing.assert_allclose(evaluate(out.samples[1], grid), 1.0, atol=1e-8)


def test_standardize_moments_random():
    rng = np.random.default_rng(11)
    b = build_basis("bspline", 12, 3)
    t = np.linspace(0, 1, 60)
    # smooth components whose pointwise sd stays away from zero
    paths = [SamplePath(i, t, np.column_stack([rng.normal() + rng.normal() * t + 0.3 * rng.normal() * np.cos(np.pi * t),
                                               rng.normal() * (1 + t) + 0.5 * rng.normal() * t ** 2]))
             for i in range(20)]
    out = standardize(smooth_all(paths, b, 1e-4))
    V = out.coeff_array() @ b.quad_values.T
    assert np.max(np.abs(V.mean(axis=0))) < 1e-8
    var = V.var(axis=0)
    assert var.min() > 0.999 and var.max() < 1.001


def test_standardize_degenerate_variance_warns():
    b = build_basis("bspline", 6, 3)
    c = np.ones((1, 6))
    ds = FunctionalDataset([FunctionalSample(0, c, b), FunctionalSample(1, c, b)], b)
    with pytest.warns(DegenerateVarianceWarning):
        out = standardize(ds)
    assert np.allclose(out.coeff_array(), 0.0, atol=1e-10)


def test_dataset_rejects_mixed_bases():
    b1 = build_basis("bspline", 6, 3)
    b2 = build_basis("bspline", 7, 3)
    with pytest.raises(BasisMismatch):
        FunctionalDataset([FunctionalSample(0, np.zeros((1, 6)), b1), FunctionalSample(1, np.zeros((1, 7)), b2)], b1)
