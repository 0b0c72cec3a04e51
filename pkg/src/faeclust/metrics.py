"""Distances between functional samples and the sparse similarity graph.

Three families are provided: the Hilbert (L2) distance through the Gram
matrix, the elastic distance between square-root velocity (SRV) transforms
minimized over time warps by dynamic programming, and DTW approximations
(multiresolution "fast" and LB_Keogh-pruned banded "ultra").
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import BasisMismatch, GridTooSmall
from .fdata import BasisSystem, FunctionalSample, build_basis

logger = logging.getLogger(__name__)

METRIC_KINDS = ("hilbert_l2", "elastic_srv", "dtw_fast", "dtw_ultra")
_CLI_METRICS = {"l2": "hilbert_l2", "srv": "elastic_srv", "dtw-fast": "dtw_fast", "dtw-ultra": "dtw_ultra"}

SRV_EPS = 1e-8


def metric_kind(name):
    """Normalize a metric name (CLI spelling or canonical)."""
    if name in METRIC_KINDS:
        return name
    try:
        return _CLI_METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}") from None


@dataclass
class DistanceMatrix:
    values: np.ndarray
    metric_kind: str

    def __post_init__(self):
        D = np.asarray(self.values, dtype=float)
        D = 0.5 * (D + D.T)
        np.fill_diagonal(D, 0.0)
        self.values = np.maximum(D, 0.0)

    @property
    def n(self):
        return self.values.shape[0]


@dataclass
class SimilarityGraph:
    """Symmetric sparse weights stored as an upper-triangle edge list."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    m_nn: int

    @property
    def n_edges(self):
        return len(self.weights)

    def dense(self):
        S = np.zeros((self.n, self.n))
        S[self.rows, self.cols] = self.weights
        S[self.cols, self.rows] = self.weights
        return S

    def edges(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist()))

    def is_connected(self):
        return _n_components(self.n, self.rows, self.cols) == 1


def _check_pair(f, g):
    if not f.basis.same_as(g.basis):
        raise BasisMismatch(f"subjects {f.subject_id} and {g.subject_id} use different bases")
    if f.p != g.p:
        raise BasisMismatch("samples have different dimension counts")


def hilbert_distance(f: FunctionalSample, g: FunctionalSample) -> float:
    """``sqrt(sum_d ||f^d - g^d||^2)`` via the Gram form."""
    _check_pair(f, g)
    diff = f.coeffs - g.coeffs
    val = np.einsum("du,uv,dv->", diff, f.basis.gram, diff)
    return float(math.sqrt(max(val, 0.0)))


def uniform_grid(basis: BasisSystem, n_points: int) -> np.ndarray:
    return np.linspace(basis.domain[0], basis.domain[1], int(n_points))


def srv_transform(sample: FunctionalSample, grid) -> np.ndarray:
    """Square-root velocity transform on ``grid``; shape ``(p, len(grid))``.

    Derivatives come from the basis; points where the speed is at most
    ``SRV_EPS`` map to zero.
    """
    grid = np.asarray(grid, dtype=float)
    vel = sample.coeffs @ sample.basis.evaluate(grid, deriv=1).T
    return srv_from_velocity(vel)


def srv_from_velocity(vel):
    vel = np.asarray(vel, dtype=float)
    speed = np.sqrt(np.sum(vel * vel, axis=0))
    out = np.zeros_like(vel)
    ok = speed > SRV_EPS
    out[:, ok] = vel[:, ok] / np.sqrt(speed[ok])
    return out


def _trapezoid_sq(q, h):
    sq = np.sum(q * q, axis=0)
    return h * (sq.sum() - 0.5 * (sq[0] + sq[-1]))


def warp_neighbourhood(max_step=5):
    """Coprime step pairs ``(a, b)`` with ``1 <= a, b <= max_step``."""
    steps = [(a, b) for a in range(1, max_step + 1) for b in range(1, max_step + 1)
             if math.gcd(a, b) == 1]
    return np.array(steps, dtype=np.int64)


_NBRS = warp_neighbourhood()


def _smooth_warp(path, n, width):
    """Piecewise-linear DP warp on the grid, smoothed by a moving average.

    Averaging monotone functions keeps monotonicity; odd reflection about
    both ends keeps the endpoints fixed.
    """
    x = np.arange(n, dtype=float)
    g = np.interp(x, path[:, 0].astype(float), path[:, 1].astype(float))
    if width < 2:
        return g
    last = float(n - 1)
    pad = min(width, n - 1)
    left = -g[pad:0:-1]
    right = 2 * last - g[-2:-pad - 2:-1]
    ext = np.concatenate([left, g, right])
    kern = np.ones(width) / width
    kern = np.convolve(kern, kern)  # triangular
    sm = np.convolve(ext, kern, mode="same")
    out = sm[pad:pad + n]
    out[0], out[-1] = 0.0, last
    return np.clip(out, 0.0, last)


def _warped_residual(q1, q2, g, h):
    """``||q1 - (q2 o g) sqrt(g')||^2`` by the trapezoid rule; g in grid units."""
    n = q1.shape[1]
    idx = np.arange(n, dtype=float)
    dg = np.maximum(np.gradient(g), 0.0)
    warped = np.vstack([np.interp(g, idx, row) for row in q2]) * np.sqrt(dg)
    return _trapezoid_sq(q1 - warped, h)


def _refine_warp(q1, q2, h, g0, n_knots):
    """Polish a warp by L-BFGS on a cubic-spline log-slope parameterization.

    The warp has cell slopes ``v = M softmax(H theta)`` so it is strictly
    increasing with fixed endpoints; the residual gradient is analytic.
    Returns the smallest residual found.
    """
    from scipy.optimize import minimize

    p, n = q1.shape
    M = n - 1
    mids = (np.arange(M) + 0.5) / M
    H = build_basis("bspline", n_knots, 3, (0.0, 1.0)).evaluate(mids)
    theta0 = np.linalg.lstsq(H, np.log(np.maximum(np.diff(g0), 1e-3)), rcond=None)[0]
    om = np.full(n, h)
    om[0] = om[-1] = 0.5 * h
    dq2 = np.diff(q2, axis=1)

    def fun(theta):
        phi = H @ theta
        e = np.exp(phi - phi.max())
        v = e * (M / e.sum())
        g = np.concatenate([[0.0], np.cumsum(v)])
        g[-1] = M
        np.clip(g, 0.0, M, out=g)
        d = np.empty(n)
        d[0], d[-1] = v[0], v[-1]
        d[1:-1] = 0.5 * (v[1:] + v[:-1])
        seg = np.minimum(g.astype(np.int64), M - 1)
        Q = q2[:, seg] + (g - seg) * dq2[:, seg]
        sd = np.sqrt(d)
        r = q1 - Q * sd
        R = float(np.sum(om * np.sum(r * r, axis=0)))
        dg = -2.0 * om * np.sum(r * dq2[:, seg], axis=0) * sd
        # cells whose slope underflowed to zero get a zero (sub)gradient
        dd = -om * np.sum(r * Q, axis=0) / np.where(sd > 0, sd, np.inf)
        dg[-1] = 0.0  # last node is pinned
        tail = np.cumsum(dg[::-1])[::-1]
        G = tail[1:] + 0.5 * (dd[:-1] + dd[1:])
        G[0] += 0.5 * dd[0]
        G[-1] += 0.5 * dd[-1]
        return R, H.T @ (v * (G - np.dot(G, v) / M))

    r0 = fun(theta0)[0]
    if r0 <= 0.0:
        return r0
    res = minimize(lambda th: tuple(x / r0 for x in fun(th)), theta0, jac=True,
                   method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-14, "maxiter": 500})
    return min(r0, float(res.fun) * r0)


def _canonical(q1, q2):
    # deterministic argument order makes the distance exactly symmetric
    a = np.ascontiguousarray(q1, dtype=float)
    b = np.ascontiguousarray(q2, dtype=float)
    return (a, b) if a.tobytes() <= b.tobytes() else (b, a)


def elastic_distance_srv(q1, q2, h, nbrs=None, refine=True):
    """Elastic distance between two SRVs given as ``(p, N)`` arrays on a uniform grid.

    The dynamic program gives a discretized optimum whose slope set limits
    accuracy.  With ``refine`` its warp path is smoothed and then polished by
    a local continuous optimization; every candidate is an admissible warp,
    and the smallest residual (or the raw DP value, if lower) is returned.
    """
    nbrs = _NBRS if nbrs is None else nbrs
    a, b = _canonical(q1, q2)
    cross, path = _kernels.elastic_dp(np.ascontiguousarray(a.T), np.ascontiguousarray(b.T),
                                      float(h), nbrs)
    best = max(_trapezoid_sq(a, h) + _trapezoid_sq(b, h) - 2.0 * cross, 0.0)
    if not refine or best == 0.0:
        return math.sqrt(best)
    # refine in both directions: a warp with unbounded slope one way has a
    # vanishing slope the other way, and only one of the two is easy to fit
    cand = [_refine_direction(a, b, h, path, nbrs),
            _refine_direction(b, a, h, path[:, ::-1].copy(), nbrs)]
    return math.sqrt(max(min([best] + cand), 0.0))


def _refine_direction(q1, q2, h, path, nbrs):
    n = q1.shape[1]
    width = int(nbrs.max()) + 1
    g_best, r_best = None, np.inf
    while width <= max(n // 8, int(nbrs.max()) + 1):
        g = _smooth_warp(path, n, width)
        r = _warped_residual(q1, q2, g, h)
        if r < r_best:
            g_best, r_best = g, r
        width *= 2
    return min(r_best, _refine_warp(q1, q2, h, g_best, max(8, n // 8)))


def elastic_distance(f: FunctionalSample, g: FunctionalSample, N: int = 128, nbrs=None,
                     refine: bool = True) -> float:
    """Warp-minimized distance between SRV transforms on an ``N``-point grid.

    A dynamic program over monotone piecewise-linear warps with slopes drawn
    from a small coprime step set approximates the infimum over
    reparameterizations.  Translation drops out through the derivative.
    """
    if N < 16:
        raise GridTooSmall(f"elastic distance needs N >= 16, got {N}")
    _check_pair(f, g)
    grid = uniform_grid(f.basis, N)
    h = grid[1] - grid[0]
    return elastic_distance_srv(srv_transform(f, grid), srv_transform(g, grid), h, nbrs, refine)


# -- DTW ---------------------------------------------------------------------


def dtw_exact(a, b):
    """Full O(N^2) DTW cost between ``(N, p)`` sequences."""
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    lo = np.zeros(len(a), dtype=np.int64)
    hi = np.full(len(a), len(b) - 1, dtype=np.int64)
    cost, _ = _kernels.dtw_ranges(a, b, lo, hi)
    return float(cost)


def _coarsen(x):
    n = len(x) - len(x) % 2
    half = 0.5 * (x[:n:2] + x[1:n:2])
    if len(x) % 2:
        half = np.vstack([half, x[-1:]])
    return half


def _expand_window(path, n, m, radius):
    """Per-row column ranges at full resolution from a half-resolution path.

    The path is widened by ``radius`` cells at the coarse level (as the
    reference FastDTW implementation does) and then projected 2x.
    """
    return _kernels.expand_window(np.ascontiguousarray(path, dtype=np.int64), int(n), int(m), int(radius))


def fast_dtw(a, b, radius=1):
    """Multiresolution DTW: coarsen, solve, project the path and refine in a window.

    Returns ``(cost, path)``.  The cost is never below the exact DTW cost and
    equals it once ``radius`` covers the whole matrix.
    """
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    n, m = len(a), len(b)
    min_size = radius + 2
    if n <= min_size or m <= min_size or radius >= max(n, m):
        lo = np.zeros(n, dtype=np.int64)
        hi = np.full(n, m - 1, dtype=np.int64)
        return _kernels.dtw_ranges(a, b, lo, hi)
    _, low_path = fast_dtw(_coarsen(a), _coarsen(b), radius)
    lo, hi = _expand_window(low_path, n, m, radius)
    return _kernels.dtw_ranges(a, b, lo, hi)


def ultra_dtw(a, b, band=None, cutoff=np.inf):
    """Banded DTW pruned by LB_Keogh; returns ``inf`` when the bound exceeds ``cutoff``."""
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    band = math.ceil(0.1 * len(a)) if band is None else int(band)
    if np.isfinite(cutoff) and _kernels.lb_keogh(a, b, band) > cutoff:
        return np.inf
    return float(_kernels.dtw_band(a, b, band, cutoff))


def dtw_distance(f: FunctionalSample, g: FunctionalSample, N: int = 64, mode: str = "fast",
                 radius: int = 1) -> float:
    """DTW cost between the grid values of two samples (sum of squared steps)."""
    if N < 16:
        raise GridTooSmall(f"DTW needs N >= 16, got {N}")
    _check_pair(f, g)
    grid = uniform_grid(f.basis, N)
    a = (f.coeffs @ f.basis.evaluate(grid).T).T
    b = (g.coeffs @ g.basis.evaluate(grid).T).T
    return _dtw_values(a, b, mode, radius)


def _dtw_values(a, b, mode, radius):
    if mode == "fast":
        if radius < 1:
            raise ValueError("fast DTW needs radius >= 1")
        return float(fast_dtw(a, b, radius)[0])
    if mode == "ultra":
        return ultra_dtw(a, b)
    raise ValueError(f"unknown DTW mode {mode!r}")


# -- pairwise matrices -------------------------------------------------------


def pairwise_distances(samples, metric="hilbert_l2", N=64, radius=1, refine=True) -> DistanceMatrix:
    """Full symmetric distance matrix over a list of samples.

    ``refine`` applies to the elastic metric only; turning it off keeps the
    raw dynamic-programming optimum and is several times faster.
    """
    kind = metric_kind(metric)
    n = len(samples)
    for s in samples[1:]:
        _check_pair(samples[0], s)
    D = np.zeros((n, n))
    if kind == "hilbert_l2":
        basis = samples[0].basis
        C = np.stack([s.coeffs for s in samples])  # (n, p, m)
        L = np.linalg.cholesky(basis.gram)
        Y = (C @ L).reshape(n, -1)
        sq = np.sum(Y * Y, axis=1)
        D2 = sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T
        D = np.sqrt(np.maximum(D2, 0.0))
        return DistanceMatrix(D, kind)
    if N < 16:
        raise GridTooSmall(f"grid size {N} < 16")
    grid = uniform_grid(samples[0].basis, N)
    if kind == "elastic_srv":
        h = grid[1] - grid[0]
        Q = [srv_transform(s, grid) for s in samples]
        for i in range(n):
            for j in range(i + 1, n):
                D[i, j] = D[j, i] = elastic_distance_srv(Q[i], Q[j], h, refine=refine)
    else:
        mode = "fast" if kind == "dtw_fast" else "ultra"
        B = samples[0].basis.evaluate(grid)
        V = [np.ascontiguousarray((s.coeffs @ B.T).T) for s in samples]
        for i in range(n):
            for j in range(i + 1, n):
                D[i, j] = D[j, i] = _dtw_values(V[i], V[j], mode, radius)
    return DistanceMatrix(D, kind)


# -- neighbourhoods and graph ------------------------------------------------


def knn_sets(D, m):
    """Index arrays of the ``m`` nearest neighbours per row (ties -> smaller index)."""
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    out = np.empty((n, m), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, D[i, others]))
        out[i] = others[order[:m]]
    return out


def union_knn_edges(D, m):
    """Upper-triangle edges ``(i, j)`` with ``j in N_m(i)`` or ``i in N_m(j)``."""
    nb = knn_sets(D, m)
    n = nb.shape[0]
    rows = np.repeat(np.arange(n), m)
    cols = nb.ravel()
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def _n_components(n, rows, cols):
    adj = [[] for _ in range(n)]
    for i, j in zip(rows.tolist(), cols.tolist()):
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    comps = 0
    for s in range(n):
        if seen[s]:
            continue
        comps += 1
        seen[s] = True
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    return comps


def select_neighborhood_size(D, strategy="knee") -> int:
    """Choose the neighbourhood size ``m`` for the kNN similarity graph.

    ``knee`` takes the maximum-curvature point (largest absolute discrete
    second difference) of the mean k-th neighbour distance for
    ``k = 1..ceil(n/2)``; a flat curve falls back to ``ceil(log2 n)``.
    ``connectivity`` returns the smallest ``m`` whose union-kNN graph is
    connected.
    """
    if isinstance(D, DistanceMatrix):
        D = D.values
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if n < 3:
        raise ValueError("neighbourhood selection needs n >= 3")
    fallback = max(1, min(n - 1, math.ceil(math.log2(n))))
    if strategy == "connectivity":
        for m in range(1, n):
            rows, cols = union_knn_edges(D, m)
            if _n_components(n, rows, cols) == 1:
                return m
        return n - 1
    if strategy != "knee":
        raise ValueError(f"unknown strategy {strategy!r}")
    kmax = math.ceil(n / 2)
    off = np.where(np.eye(n, dtype=bool), np.inf, D)
    srt = np.sort(off, axis=1)[:, :kmax]
    curve = srt.mean(axis=0)
    if len(curve) < 3:
        return fallback
    second = np.abs(np.diff(curve, 2))
    if np.all(second < 1e-12):
        return fallback
    # second[k] is centred on curve index k + 1, i.e. neighbour count k + 2
    return int(min(n - 1, np.argmax(second) + 2))


def build_similarity_graph(D, m: int, raw_exp: bool = False) -> SimilarityGraph:
    """Union-kNN graph with weights ``exp(-d / median(positive d))``.

    ``raw_exp`` drops the median scaling and uses ``exp(-d)``.
    """
    kind = None
    if isinstance(D, DistanceMatrix):
        kind = D.metric_kind
        D = D.values
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if not 1 <= m <= n - 1:
        raise ValueError(f"neighbourhood size {m} outside [1, {n - 1}]")
    rows, cols = union_knn_edges(D, m)
    if raw_exp:
        scale = 1.0
    else:
        pos = D[np.triu_indices(n, 1)]
        pos = pos[pos > 0]
        scale = float(np.median(pos)) if len(pos) else 1.0
    w = np.exp(-D[rows, cols] / scale)
    logger.debug("similarity graph: n=%d m=%d edges=%d metric=%s", n, m, len(w), kind)
    return SimilarityGraph(n, rows.astype(np.int64), cols.astype(np.int64), w, int(m))
