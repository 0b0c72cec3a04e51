"""Functional data representation: basis systems, smoothing and standardization.

Every functional object in the package is a coefficient matrix over a shared
:class:`BasisSystem`.  The basis carries its Gram matrix, its second-derivative
roughness penalty and a composite Gauss-Legendre quadrature rule, so inner
products reduce to quadratic forms and grid evaluations share one set of nodes.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

from .errors import (
    BasisMismatch,
    DegenerateVarianceWarning,
    InvalidBasisConfig,
    InvalidSamplePath,
    OutOfDomain,
    SingularSystem,
)

logger = logging.getLogger(__name__)

_DOMAIN_TOL = 1e-10


def gauss_legendre_panels(breaks, nodes_per_panel):
    """Composite Gauss-Legendre rule over consecutive ``breaks``.

    Returns ``(nodes, weights)``; exact for piecewise polynomials of degree
    ``2 * nodes_per_panel - 1`` with breakpoints in ``breaks``.
    """
    breaks = np.asarray(breaks, dtype=float)
    x, w = np.polynomial.legendre.leggauss(int(nodes_per_panel))
    lo, hi = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + hi) / 2 + half * x[None, :]
    weights = half * w[None, :]
    return nodes.ravel(), weights.ravel()


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """An evaluated basis family on a closed interval.

    Attributes
    ----------
    kind : {"bspline", "fourier"}
    m : int
        Number of basis functions.
    degree : int
        Spline degree (ignored for Fourier).
    domain : tuple of float
        Closed interval ``(a, b)``.
    knots : ndarray
        Full knot vector (B-splines) or panel breakpoints (Fourier).
    gram : ndarray, shape (m, m)
        ``<b_u, b_v>`` in L2 over the domain.
    penalty : ndarray, shape (m, m)
        ``int b_u'' b_v''``.
    quad_nodes, quad_weights : ndarray
        Quadrature rule shared by all grid computations.
    """

    kind: str
    m: int
    degree: int
    domain: tuple
    knots: np.ndarray
    gram: np.ndarray = field(repr=False)
    penalty: np.ndarray = field(repr=False)
    quad_nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)

    @property
    def key(self):
        return (self.kind, self.m, self.degree, float(self.domain[0]), float(self.domain[1]))

    @property
    def length(self):
        return float(self.domain[1] - self.domain[0])

    def same_as(self, other):
        return other is self or (isinstance(other, BasisSystem) and other.key == self.key)

    def check_in_domain(self, t):
        t = np.asarray(t, dtype=float)
        a, b = self.domain
        tol = _DOMAIN_TOL * max(1.0, abs(a), abs(b))
        bad = (t < a - tol) | (t > b + tol)
        if np.any(bad):
            raise OutOfDomain(f"points {t[bad][:5].tolist()} outside domain [{a}, {b}]")
        return np.clip(t, a, b)

    def evaluate(self, t, deriv=0):
        """Basis values (or derivatives) at ``t``; shape ``(len(t), m)``."""
        t = self.check_in_domain(np.atleast_1d(t))
        if self.kind == "bspline":
            spl = BSpline(self.knots, np.eye(self.m), self.degree, extrapolate=False)
            out = spl(t, nu=deriv)
            # right endpoint: extrapolate=False yields nan exactly at b for some scipy versions
            if np.isnan(out).any():
                spl_ex = BSpline(self.knots, np.eye(self.m), self.degree, extrapolate=True)
                bad = np.isnan(out).any(axis=1)
                out[bad] = spl_ex(t[bad], nu=deriv)
            return out
        return _fourier_eval(t, self.m, self.domain, deriv)

    @cached_property
    def quad_values(self):
        """Basis evaluated at the quadrature nodes, shape ``(G, m)``."""
        return self.evaluate(self.quad_nodes)

    @cached_property
    def penalty_root(self):
        """Matrix ``R`` with ``R.T @ R == penalty`` (eigen square root)."""
        vals, vecs = np.linalg.eigh(self.penalty)
        vals = np.clip(vals, 0.0, None)
        return np.sqrt(vals)[:, None] * vecs.T


def _fourier_eval(t, m, domain, deriv):
    a, b = domain
    L = b - a
    s = t - a
    out = np.empty((len(t), m))
    for v in range(m):
        if v == 0:
            out[:, 0] = 1.0 / math.sqrt(L) if deriv == 0 else 0.0
            continue
        k = (v + 1) // 2
        w = 2.0 * math.pi * k / L
        c = math.sqrt(2.0 / L) * w ** deriv
        # sin for odd v, cos for even v; derivative cycles the phase
        phase = (0.0 if v % 2 == 1 else math.pi / 2) + deriv * math.pi / 2
        out[:, v] = c * np.sin(w * s + phase)
    return out


def build_basis(kind="bspline", m=12, degree=3, domain=(0.0, 1.0)) -> BasisSystem:
    """Construct a :class:`BasisSystem` with Gram, penalty and quadrature.

    B-spline knots are uniform on the domain with full multiplicity at the
    ends.  The Fourier family is the orthonormal constant/sin/cos system.
    """
    a, b = (float(domain[0]), float(domain[1]))
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise InvalidBasisConfig(f"degenerate domain {domain!r}")
    m = int(m)
    degree = int(degree)
    if kind == "bspline":
        if degree < 0 or m < degree + 1:
            raise InvalidBasisConfig(f"bspline basis needs m >= degree + 1 (m={m}, degree={degree})")
        interior = np.linspace(a, b, m - degree + 1)
        knots = np.concatenate([np.full(degree, a), interior, np.full(degree, b)])
        breaks = interior
    elif kind == "fourier":
        if m < 1:
            raise InvalidBasisConfig("fourier basis needs m >= 1")
        # panels fine enough for the highest harmonic
        n_panels = max(8, 2 * ((m + 1) // 2))
        breaks = np.linspace(a, b, n_panels + 1)
        knots = breaks
    else:
        raise InvalidBasisConfig(f"unknown basis kind {kind!r}")

    n_panels = len(breaks) - 1
    total = max(4 * m, 200)
    per_panel = max(degree + 1, math.ceil(total / n_panels), 4)
    nodes, weights = gauss_legendre_panels(breaks, per_panel)

    proto = BasisSystem(kind, m, degree, (a, b), knots, None, None, nodes, weights)
    B = proto.evaluate(nodes)
    B2 = proto.evaluate(nodes, deriv=2) if (kind == "fourier" or degree >= 2) else np.zeros_like(B)
    gram = (B * weights[:, None]).T @ B
    penalty = (B2 * weights[:, None]).T @ B2
    gram = 0.5 * (gram + gram.T)
    penalty = 0.5 * (penalty + penalty.T)
    return BasisSystem(kind, m, degree, (a, b), knots, gram, penalty, nodes, weights)


def cross_gram(basis_a: BasisSystem, basis_b: BasisSystem) -> np.ndarray:
    """Matrix of ``<a_u, b_v>`` between two bases on the same domain."""
    if basis_a.domain != basis_b.domain:
        raise BasisMismatch("cross Gram needs a common domain")
    breaks = np.union1d(np.unique(basis_a.knots), np.unique(basis_b.knots))
    breaks = breaks[(breaks >= basis_a.domain[0]) & (breaks <= basis_a.domain[1])]
    per = max(8, basis_a.degree + basis_b.degree + 2)
    if "fourier" in (basis_a.kind, basis_b.kind):
        breaks = np.union1d(breaks, np.linspace(*basis_a.domain, 65))
    nodes, weights = gauss_legendre_panels(breaks, per)
    A = basis_a.evaluate(nodes)
    B = basis_b.evaluate(nodes)
    return (A * weights[:, None]).T @ B


@dataclass
class SamplePath:
    """Discrete noisy observations of one subject's p-dimensional function."""

    subject_id: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]

    def validate(self, domain=None):
        sid = self.subject_id
        t = self.times
        if self.values.shape[0] != len(t):
            raise InvalidSamplePath(f"subject {sid}: {len(t)} times but {self.values.shape[0]} value rows")
        if len(t) < 4:
            raise InvalidSamplePath(f"subject {sid}: needs at least 4 observations, got {len(t)}")
        if np.any(np.diff(t) <= 0):
            raise InvalidSamplePath(f"subject {sid}: times are not strictly increasing")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(t)):
            raise InvalidSamplePath(f"subject {sid}: non-finite observations")
        if domain is not None:
            a, b = domain
            tol = _DOMAIN_TOL * max(1.0, abs(a), abs(b))
            if t[0] < a - tol or t[-1] > b + tol:
                raise InvalidSamplePath(f"subject {sid}: times outside domain [{a}, {b}]")
        return self

    @property
    def p(self):
        return self.values.shape[1]


@dataclass
class FunctionalSample:
    """Basis coefficients (p x m) of one subject's function."""

    subject_id: int
    coeffs: np.ndarray
    basis: BasisSystem = field(repr=False)

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape[1] != self.basis.m:
            raise BasisMismatch(f"coefficient width {self.coeffs.shape[1]} != basis size {self.basis.m}")

    @property
    def p(self):
        return self.coeffs.shape[0]


@dataclass
class FunctionalDataset:
    samples: list
    basis: BasisSystem
    standardized: bool = False
    labels_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.samples:
            p = self.samples[0].p
            for s in self.samples:
                if not s.basis.same_as(self.basis):
                    raise BasisMismatch(f"subject {s.subject_id} uses a different basis")
                if s.p != p:
                    raise BasisMismatch(f"subject {s.subject_id} has {s.p} dims, expected {p}")
        if self.labels_truth is not None:
            self.labels_truth = np.asarray(self.labels_truth, dtype=int)
            if len(self.labels_truth) != len(self.samples):
                raise InvalidSamplePath("labels_truth length differs from sample count")

    def __len__(self):
        return len(self.samples)

    @property
    def p(self):
        return self.samples[0].p

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.samples]

    def coeff_array(self):
        """Stacked coefficients, shape ``(n, p, m)``."""
        return np.stack([s.coeffs for s in self.samples])


def _solve_penalized(B, Y, basis, lambda_s):
    """Solve ``min ||Y - B C||^2 + lambda_s C^T P C`` column-wise."""
    if lambda_s > 0:
        A = np.vstack([B, math.sqrt(lambda_s) * basis.penalty_root])
        rhs = np.vstack([Y, np.zeros((basis.m, Y.shape[1]))])
    else:
        A, rhs = B, Y
    sv = np.linalg.svd(A, compute_uv=False)
    cond = sv[0] / sv[-1] if sv[-1] > 0 and A.shape[0] >= A.shape[1] else np.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystem(f"smoothing system is singular (condition {cond:.3g})")
    coef, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return coef


def smooth(path: SamplePath, basis: BasisSystem, lambda_s: float = 1e-4) -> FunctionalSample:
    """Penalized least-squares fit of a sample path onto ``basis``.

    Each dimension is fitted independently by minimizing the residual sum of
    squares plus ``lambda_s`` times the integrated squared second derivative.
    """
    if lambda_s < 0:
        raise ValueError("lambda_s must be nonnegative")
    path.validate(basis.domain)
    B = basis.evaluate(path.times)
    try:
        coef = _solve_penalized(B, path.values, basis, lambda_s)
    except SingularSystem as exc:
        raise SingularSystem(f"subject {path.subject_id}: {exc}") from None
    return FunctionalSample(path.subject_id, coef.T, basis)


def smooth_all(paths: Sequence[SamplePath], basis: BasisSystem, lambda_s: float = 1e-4,
               labels=None) -> FunctionalDataset:
    samples = [smooth(p, basis, lambda_s) for p in paths]
    return FunctionalDataset(samples, basis, labels_truth=labels)


def evaluate(sample: FunctionalSample, grid) -> np.ndarray:
    """Values of a sample on ``grid``, shape ``(p, len(grid))``."""
    B = sample.basis.evaluate(np.asarray(grid, dtype=float))
    return sample.coeffs @ B.T


def inner_product(f, g, basis: BasisSystem) -> float:
    """Hilbert inner product of two coefficient rows (or 1-dim samples)."""
    cf = _row(f, basis)
    cg = _row(g, basis)
    return float(cf @ basis.gram @ cg)


def _row(f, basis):
    if isinstance(f, FunctionalSample):
        if not f.basis.same_as(basis):
            raise BasisMismatch("sample basis differs from the given basis")
        c = f.coeffs
        if c.shape[0] != 1:
            raise BasisMismatch("inner_product expects a single coefficient row")
        c = c[0]
    else:
        c = np.asarray(f, dtype=float)
    if c.shape != (basis.m,):
        raise BasisMismatch(f"coefficient row of shape {c.shape} does not match basis size {basis.m}")
    return c


def standardize(dataset: FunctionalDataset, var_floor: float = 1e-10) -> FunctionalDataset:
    """Center and scale each component function pointwise on the quadrature grid.

    The standardized grid values are re-projected onto the basis by ordinary
    least squares.  The grid mean of the result is exactly zero; the grid
    variance is one up to the error of representing ``(y - mean) / sd`` in the
    basis, which vanishes when the standard-deviation function is constant.
    Grid points whose variance is at most ``var_floor`` are centered only.
    """
    n = len(dataset)
    if n < 2:
        raise InvalidSamplePath("standardize needs at least two samples")
    basis = dataset.basis
    V = dataset.coeff_array() @ basis.quad_values.T  # (n, p, G)
    mean = V.mean(axis=0)
    var = V.var(axis=0)
    ok = var > var_floor
    if not ok.all():
        msg = f"{int((~ok).sum())} grid points have variance <= {var_floor}; centered only"
        warnings.warn(msg, DegenerateVarianceWarning, stacklevel=2)
        logger.warning(msg)
    sd = np.sqrt(np.where(ok, var, 1.0))
    C = project_grid_values((V - mean) / sd, basis)
    samples = [FunctionalSample(s.subject_id, C[i], basis) for i, s in enumerate(dataset.samples)]
    return FunctionalDataset(samples, basis, standardized=True, labels_truth=dataset.labels_truth)


def project_grid_values(values, basis: BasisSystem, grid=None):
    """Least-squares coefficients for values given on ``grid`` (default: quadrature nodes).

    ``values`` has shape ``(..., len(grid))``; the result has shape ``(..., m)``.
    """
    values = np.asarray(values, dtype=float)
    B = basis.quad_values if grid is None else basis.evaluate(grid)
    flat = values.reshape(-1, values.shape[-1]).T
    coef, *_ = np.linalg.lstsq(B, flat, rcond=None)
    return coef.T.reshape(values.shape[:-1] + (basis.m,))
