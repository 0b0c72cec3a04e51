"""Simulated manifold-valued functional datasets and random time warps.

Five generators produce noisy sample paths on ``[0, 1]``:

* ``hypersphere`` - great circles on the unit sphere; clusters differ in the
  rotation axis and angular speed, phases are random.
* ``hyperbolic`` - geodesics of the Poincare disk through a random base
  point; one cluster covers a short hyperbolic distance (stays central), the
  other a long one (approaches the boundary).
* ``swissroll`` - curves on the swiss-roll surface, one vertical band per
  cluster; the first ``n_dims`` of ``(theta cos theta, z, theta sin theta)``
  are emitted.
* ``lorenz`` - RK4 trajectories of the Lorenz system for
  ``rho in {14, 21, 28}``.
* ``pendulum`` - RK4 trajectories of ``theta'' = -sin(theta)`` at two energy
  levels below and two above the separatrix; state ``(theta, theta')`` with
  ``theta`` wrapped to ``[-pi, pi)``.

Every subject draws from its own stream derived from ``(seed, subject_id)`` so
datasets are reproducible regardless of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator

from ._kernels import ode_field, rk4_system
from .errors import InvalidSpec, InvalidWarp
from .fdata import FunctionalSample, SamplePath

KINDS = ("hypersphere", "hyperbolic", "swissroll", "lorenz", "pendulum")

# (n_samples, n_dims, n_steps, n_clusters)
DEFAULT_SHAPES = {
    "hypersphere": (100, 3, 100, 2),
    "hyperbolic": (200, 2, 50, 2),
    "swissroll": (300, 2, 200, 4),
    "lorenz": (100, 3, 100, 3),
    "pendulum": (200, 2, 100, 4),
}

RK4_STEP = 0.01
PENDULUM_SPACING = 0.05
PENDULUM_ENERGIES = (-0.6, 0.2, 1.6, 3.0)
PENDULUM_JITTER = 0.05
PENDULUM_PHASE_WINDOW = 0.5
LORENZ_RHO = (14.0, 21.0, 28.0)
LORENZ_SIGMA = 10.0
LORENZ_BETA = 8.0 / 3.0
LORENZ_SPACING = 0.05
# the chaotic classes amplify step error, so a finer step keeps step halving below 1e-5
LORENZ_RK4_STEP = 0.001


@dataclass
class SimSpec:
    kind: str
    n_samples: Optional[int] = None
    n_dims: Optional[int] = None
    n_steps: Optional[int] = None
    n_clusters: Optional[int] = None
    noise_sigma: float = 0.0
    seed: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        d = DEFAULT_SHAPES[self.kind]
        self.n_samples = d[0] if self.n_samples is None else int(self.n_samples)
        self.n_dims = d[1] if self.n_dims is None else int(self.n_dims)
        self.n_steps = d[2] if self.n_steps is None else int(self.n_steps)
        self.n_clusters = d[3] if self.n_clusters is None else int(self.n_clusters)
        max_dims = 2 if self.kind in ("pendulum", "hyperbolic") else 3
        if not 1 <= self.n_dims <= max_dims:
            raise InvalidSpec(f"{self.kind}: n_dims must lie in [1, {max_dims}]")
        if self.n_samples < self.n_clusters or self.n_steps < 4:
            raise InvalidSpec("need n_samples >= n_clusters and n_steps >= 4")
        if self.n_clusters != d[3]:
            raise InvalidSpec(f"{self.kind}: the generator defines exactly {d[3]} clusters")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be nonnegative")


@dataclass
class WarpSpec:
    n_knots: int = 4
    max_speed_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_knots < 2:
            raise InvalidSpec("n_knots must be >= 2")
        if self.max_speed_ratio < 1.0:
            raise InvalidSpec("max_speed_ratio must be >= 1")


def subject_rng(seed, subject_id, stream=0):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(subject_id))))


# -- warps ---------------------------------------------------------------------


def make_warp(spec: WarpSpec, max_attempts: int = 100):
    """Random increasing warp of ``[0, 1]`` with ``h' in [1/r, r]``.

    Knot images come from cumulative random segment speeds ``exp(U(-log r,
    log r))``; the monotone cubic (PCHIP) interpolant is rejected and redrawn
    until its derivative satisfies the bound on a 1001-point grid.
    """
    r = float(spec.max_speed_ratio)
    x = np.linspace(0.0, 1.0, spec.n_knots + 1)
    if r == 1.0:
        return PchipInterpolator(x, x)
    rng = np.random.default_rng(spec.seed)
    grid = np.linspace(0.0, 1.0, 1001)
    for _ in range(max_attempts):
        speeds = np.exp(rng.uniform(-math.log(r), math.log(r), spec.n_knots))
        y = np.concatenate([[0.0], np.cumsum(speeds)])
        y /= y[-1]
        h = PchipInterpolator(x, y)
        d = h.derivative()(grid)
        if d.min() >= 1.0 / r - 1e-12 and d.max() <= r + 1e-12 and np.all(np.diff(h(grid)) > 0):
            return h
    raise InvalidWarp(f"no admissible warp after {max_attempts} attempts (ratio {r})")


def apply_warp(sample, h, grid=None):
    """Re-parameterize a sample by ``h`` (defined on ``[0, 1]``).

    A :class:`FunctionalSample` is evaluated through its basis at ``h(t)`` on
    ``grid`` (default 200 points); a :class:`SamplePath` is resampled at its
    own times with a PCHIP interpolant of its values.  Returns a SamplePath.
    """
    if isinstance(sample, FunctionalSample):
        a, b = sample.basis.domain
        t = np.linspace(a, b, 200) if grid is None else np.asarray(grid, dtype=float)
        s = a + (b - a) * h((t - a) / (b - a))
        vals = sample.coeffs @ sample.basis.evaluate(np.clip(s, a, b)).T
        return SamplePath(sample.subject_id, t, vals.T)
    t = sample.times
    a, b = t[0], t[-1]
    s = a + (b - a) * h((t - a) / (b - a))
    interp = PchipInterpolator(t, sample.values, axis=0)
    return SamplePath(sample.subject_id, t, interp(np.clip(s, a, b)))


# -- ODE integration -----------------------------------------------------------


def rk4(f, y0, h, n_steps):
    """Classical RK4 for an arbitrary vector field ``f``; returns the ``(n_steps + 1, dim)`` trajectory."""
    y = np.array(y0, dtype=float)
    out = np.empty((n_steps + 1, len(y)))
    out[0] = y
    for k in range(n_steps):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y
    return out


def _pendulum_rhs(y):
    return np.array([y[1], -math.sin(y[0])])


def _lorenz_rhs(rho):
    def f(y):
        return np.array([LORENZ_SIGMA * (y[1] - y[0]), y[0] * (rho - y[2]) - y[1], y[0] * y[1] - LORENZ_BETA * y[2]])
    return f


PENDULUM, LORENZ = 0, 1


def integrate(system, y0, h, n_steps, rho=0.0):
    """Compiled RK4 for the built-in systems (``PENDULUM`` or ``LORENZ``)."""
    return rk4_system(int(system), np.asarray(y0, dtype=float), float(h), int(n_steps), float(rho))


def _ode_path(system, y0, horizon, rho=0.0, step=RK4_STEP):
    """Callable ``t in [0, 1] -> state`` built from an RK4 run over ``horizon`` time units.

    Between RK4 nodes the state is interpolated by cubic Hermite using the
    exact vector field as derivative; at node times it is the RK4 value.
    """
    n = int(round(horizon / step))
    traj = integrate(system, y0, step, n, rho)
    times = np.arange(n + 1) * step
    derivs = ode_field(int(system), traj, float(rho))
    spl = CubicHermiteSpline(times, traj, derivs, axis=0)

    def path(t):
        tau = np.clip(np.asarray(t, dtype=float) * horizon, 0.0, times[-1])
        out = spl(tau)
        # snap exact node times to the stored RK4 values
        k = np.rint(tau / step).astype(int)
        on = np.abs(tau - k * step) < 1e-9
        out[on] = traj[k[on]]
        return out
    return path


def wrap_angle(theta):
    """Map angles to ``[-pi, pi)``."""
    return (np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi


# -- generators ----------------------------------------------------------------


def _rotation_frame(axis):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


HYPERSPHERE_AXES = ((0.0, 0.0, 1.0), (math.sin(math.pi / 3), 0.0, math.cos(math.pi / 3)))
HYPERSPHERE_FREQS = (1.0, 1.5)
HYPERSPHERE_PHASE_WINDOW = 2.0


def _hypersphere(k, rng, opts):
    axis = np.array(HYPERSPHERE_AXES[k]) + opts.get("axis_jitter", 0.05) * rng.normal(size=3)
    e1, e2 = _rotation_frame(axis)
    freq = HYPERSPHERE_FREQS[k] * (1.0 + opts.get("freq_jitter", 0.05) * rng.uniform(-1, 1))
    phase = rng.uniform(0.0, opts.get("phase_window", HYPERSPHERE_PHASE_WINDOW))

    def path(t):
        ang = 2 * math.pi * freq * np.asarray(t)[:, None] + phase
        return np.cos(ang) * e1 + np.sin(ang) * e2
    return path


HYPERBOLIC_RANGES = ((0.3, 0.8), (2.0, 3.0))


def _hyperbolic(k, rng, opts):
    lo, hi = HYPERBOLIC_RANGES[k]
    reach = rng.uniform(lo, hi)
    theta = rng.uniform(0.0, 2 * math.pi)
    a = 0.2 * math.sqrt(rng.uniform()) * np.exp(1j * rng.uniform(0.0, 2 * math.pi))

    def path(t):
        s = reach * (2.0 * np.asarray(t) - 1.0)          # geodesic arclength in [-reach, reach]
        z = np.tanh(s / 2.0) * np.exp(1j * theta)
        w = (z + a) / (1.0 + np.conj(a) * z)              # Mobius map moving 0 to a
        return np.stack([w.real, w.imag], axis=1)
    return path


SWISSROLL_HEIGHT = 21.0


def _swissroll(k, rng, opts, n_clusters=4):
    band = SWISSROLL_HEIGHT / n_clusters
    centre = (k + 0.5) * band
    z0 = centre + rng.uniform(-0.15, 0.15) * band
    amp = rng.uniform(0.1, 0.25) * band
    th0 = rng.uniform(1.5 * math.pi, 2.5 * math.pi)
    span = rng.uniform(1.0 * math.pi, 2.0 * math.pi)
    phase = rng.uniform(0.0, 2 * math.pi)

    def path(t):
        t = np.asarray(t)
        th = th0 + span * t
        z = z0 + amp * np.sin(2 * math.pi * t + phase)
        return np.stack([th * np.cos(th), z, th * np.sin(th)], axis=1)
    return path


def _lorenz(k, rng, opts, n_steps=100):
    y0 = np.array([0.0, 0.0, 20.0]) + rng.normal(0.0, 5.0, size=3)
    horizon = (n_steps - 1) * opts.get("spacing", LORENZ_SPACING)
    return _ode_path(LORENZ, y0, horizon, LORENZ_RHO[k], step=LORENZ_RK4_STEP)


def pendulum_initial_state(energy):
    """State at the bottom of the swing (``theta = 0``) with the given energy."""
    v0 = math.sqrt(2.0 * (energy + 1.0))
    return np.array([0.0, v0])


def _pendulum(k, rng, opts, n_steps=100):
    energies = opts.get("energies", PENDULUM_ENERGIES)
    E = energies[k] + rng.uniform(-1.0, 1.0) * opts.get("energy_jitter", PENDULUM_JITTER)
    E = max(E, -0.99)
    y0 = pendulum_initial_state(E)
    # random phase: advance along the orbit by a random burn-in time
    burn = rng.uniform(0.0, opts.get("phase_window", PENDULUM_PHASE_WINDOW))
    nb = int(round(burn / RK4_STEP))
    if nb:
        y0 = integrate(PENDULUM, y0, RK4_STEP, nb)[-1]
    horizon = (n_steps - 1) * opts.get("spacing", PENDULUM_SPACING)
    raw = _ode_path(PENDULUM, y0, horizon)

    def path(t):
        out = raw(t)
        out[:, 0] = wrap_angle(out[:, 0])
        return out
    return path


_GENERATORS = {
    "hypersphere": lambda k, rng, spec: _hypersphere(k, rng, spec.options),
    "hyperbolic": lambda k, rng, spec: _hyperbolic(k, rng, spec.options),
    "swissroll": lambda k, rng, spec: _swissroll(k, rng, spec.options, spec.n_clusters),
    "lorenz": lambda k, rng, spec: _lorenz(k, rng, spec.options, spec.n_steps),
    "pendulum": lambda k, rng, spec: _pendulum(k, rng, spec.options, spec.n_steps),
}


def assign_labels(n, K, seed):
    """Balanced cluster labels in a seed-dependent order."""
    labels = np.arange(n) % K
    return subject_rng(seed, 0, stream=9).permutation(labels)


def generate(spec: SimSpec, warp: Optional[WarpSpec] = None):
    """Sample paths and truth labels for ``spec``.

    With ``warp`` each subject is re-parameterized by its own random warp
    (seeded from ``warp.seed`` and the subject id) before noise is added.

    Returns
    -------
    paths : list of SamplePath
    labels : ndarray of int
    """
    if not isinstance(spec, SimSpec):
        raise InvalidSpec("spec must be a SimSpec")
    t = np.linspace(0.0, 1.0, spec.n_steps)
    labels = assign_labels(spec.n_samples, spec.n_clusters, spec.seed)
    paths = []
    for i in range(spec.n_samples):
        rng = subject_rng(spec.seed, i)
        f = _GENERATORS[spec.kind](int(labels[i]), rng, spec)
        s = t
        if warp is not None:
            h = make_warp(WarpSpec(warp.n_knots, warp.max_speed_ratio,
                                   np.random.SeedSequence(int(warp.seed), spawn_key=(i,)).generate_state(1)[0]))
            s = np.clip(h(t), 0.0, 1.0)
        vals = np.asarray(f(s))[:, :spec.n_dims]
        if spec.noise_sigma > 0:
            vals = vals + spec.noise_sigma * subject_rng(spec.seed, i, stream=1).normal(size=vals.shape)
        paths.append(SamplePath(i, t.copy(), vals))
    return paths, labels
