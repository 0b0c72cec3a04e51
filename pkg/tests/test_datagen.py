import math

import numpy as np
import pytest

from faeclust.datagen import (
    DEFAULT_SHAPES,
    LORENZ,
    LORENZ_RHO,
    LORENZ_RK4_STEP,
    PENDULUM,
    RK4_STEP,
    SimSpec,
    WarpSpec,
    _lorenz_rhs,
    _pendulum_rhs,
    apply_warp,
    generate,
    integrate,
    make_warp,
    pendulum_initial_state,
    rk4,
    wrap_angle,
)
from faeclust.errors import InvalidSpec
from faeclust.fdata import build_basis, smooth, smooth_all, SamplePath
from faeclust.metrics import elastic_distance, hilbert_distance, pairwise_distances, srv_transform, uniform_grid


@pytest.mark.parametrize("kind", sorted(DEFAULT_SHAPES))
def test_default_shapes_and_determinism(kind):
    n, p, T, K = DEFAULT_SHAPES[kind]
    paths, labels = generate(SimSpec(kind, seed=3, noise_sigma=0.1))
    assert len(paths) == n and len(labels) == n
    assert paths[0].values.shape == (T, p)
    assert sorted(np.unique(labels)) == list(range(K))
    again, labels2 = generate(SimSpec(kind, seed=3, noise_sigma=0.1))
    assert np.array_equal(labels, labels2)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(paths, again))


def test_table_defaults():
    assert DEFAULT_SHAPES == {
        "hypersphere": (100, 3, 100, 2),
        "hyperbolic": (200, 2, 50, 2),
        "swissroll": (300, 2, 200, 4),
        "lorenz": (100, 3, 100, 3),
        "pendulum": (200, 2, 100, 4),
    }


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        SimSpec("torus")
    with pytest.raises(InvalidSpec):
        SimSpec("pendulum", n_dims=3)
    with pytest.raises(InvalidSpec):
        SimSpec("lorenz", n_clusters=2)
    with pytest.raises(InvalidSpec):
        SimSpec("hypersphere", noise_sigma=-1.0)


def test_hypersphere_unit_norm():
    paths, _ = generate(SimSpec("hypersphere", n_samples=20, seed=1))
    for p in paths:
        np.testing.assert_allclose(np.linalg.norm(p.values, axis=1), 1.0, atol=1e-6)


def test_hyperbolic_inside_disk():
    paths, labels = generate(SimSpec("hyperbolic", n_samples=40, seed=2))
    radii = [np.linalg.norm(p.values, axis=1).max() for p in paths]
    assert max(radii) < 1.0
    radii = np.array(radii)
    assert radii[labels == 0].mean() < radii[labels == 1].mean()


def test_pendulum_energy_conserved():
    paths, labels = generate(SimSpec("pendulum", n_samples=40, seed=4))
    for p, k in zip(paths, labels):
        theta, omega = p.values.T
        E = 0.5 * omega ** 2 - np.cos(theta)
        assert np.ptp(E) < 1e-4
    low = [p for p, k in zip(paths, labels) if k == 0]
    assert all(np.abs(p.values[:, 0]).max() < math.pi for p in low)
    assert wrap_angle(math.pi) == pytest.approx(-math.pi)


def test_lorenz_subcritical_class_settles():
    paths, labels = generate(SimSpec("lorenz", n_samples=30, seed=5))
    for p, k in zip(paths, labels):
        if LORENZ_RHO[k] == 14.0:
            v = p.values
            assert v[-20:].var(axis=0).sum() < v[:20].var(axis=0).sum()


@pytest.mark.parametrize("system,y0,rho,h", [(PENDULUM, pendulum_initial_state(1.6), 0.0, RK4_STEP),
                                             (LORENZ, [1.0, 2.0, 20.0], 28.0, LORENZ_RK4_STEP)])
def test_rk4_step_halving(system, y0, rho, h):
    n = int(round(4.95 / h))
    coarse = integrate(system, y0, h, n, rho)
    fine = integrate(system, y0, h / 2, 2 * n, rho)
    assert np.max(np.abs(coarse - fine[::2])) < 1e-5


def test_compiled_rk4_matches_reference():
    y0 = pendulum_initial_state(0.2)
    np.testing.assert_allclose(integrate(PENDULUM, y0, 0.01, 200), rk4(_pendulum_rhs, y0, 0.01, 200), atol=1e-12)
    y1 = np.array([0.5, -1.0, 18.0])
    np.testing.assert_allclose(integrate(LORENZ, y1, 0.01, 200, 21.0), rk4(_lorenz_rhs(21.0), y1, 0.01, 200),
                               atol=1e-9)


def test_identifiability_without_noise():
    basis = build_basis("bspline", 20, 3)
    for kind in sorted(DEFAULT_SHAPES):
        paths, labels = generate(SimSpec(kind, n_samples=40, seed=0))
        ds = smooth_all(paths, basis, 1e-6)
        D = pairwise_distances(ds.samples, "hilbert_l2").values
        same = labels[:, None] == labels[None, :]
        off = ~np.eye(len(labels), dtype=bool)
        within, between = D[same & off].mean(), D[~same].mean()
        if within >= between:
            D = pairwise_distances(ds.samples, "elastic_srv", N=64, refine=False).values
            within, between = D[same & off].mean(), D[~same].mean()
        assert within < between, kind


def test_make_warp_properties():
    grid = np.linspace(0, 1, 1000)
    ident = make_warp(WarpSpec(4, 1.0))
    np.testing.assert_allclose(ident(grid), grid, atol=1e-12)
    for seed in range(10):
        h = make_warp(WarpSpec(4, 2.0, seed=seed))
        assert h(0.0) == pytest.approx(0.0, abs=1e-12) and h(1.0) == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(h(grid)) > 0)
        d = h.derivative()(grid)
        assert d.min() >= 0.5 - 1e-9 and d.max() <= 2.0 + 1e-9
    a, b = make_warp(WarpSpec(3, 1.5, seed=7)), make_warp(WarpSpec(3, 1.5, seed=7))
    assert np.array_equal(a(grid), b(grid))
    with pytest.raises(InvalidSpec):
        WarpSpec(1)


def test_apply_warp_cases():
    basis = build_basis("bspline", 30, 3)
    t = np.linspace(0, 1, 300)
    f = smooth(SamplePath(0, t, np.column_stack([np.sin(2 * np.pi * t), np.cos(3 * t)])), basis, 1e-10)
    ident = make_warp(WarpSpec(4, 1.0))
    same = apply_warp(f, ident, grid=t)
    np.testing.assert_allclose(same.values, (f.coeffs @ basis.evaluate(t).T).T, atol=1e-10)
    h = make_warp(WarpSpec(4, 2.0, seed=1))
    fw = smooth(apply_warp(f, h, grid=t), basis, 1e-10)
    grid = uniform_grid(basis, 256)
    q = srv_transform(f, grid)
    norm_q = math.sqrt(np.trapezoid(np.sum(q * q, axis=0), grid))
    assert elastic_distance(f, fw, 256) < 0.05 * norm_q
    assert hilbert_distance(f, fw) > 0.01


def test_warped_generation_is_deterministic():
    a, _ = generate(SimSpec("pendulum", n_samples=8, seed=2), warp=WarpSpec(4, 2.0, seed=5))
    b, _ = generate(SimSpec("pendulum", n_samples=8, seed=2), warp=WarpSpec(4, 2.0, seed=5))
    c, _ = generate(SimSpec("pendulum", n_samples=8, seed=2))
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert not all(np.array_equal(x.values, y.values) for x, y in zip(a, c))
