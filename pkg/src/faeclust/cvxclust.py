"""Weighted convex clustering of latent embeddings by path-following homotopy.

Each latent dimension is clustered separately under the objective

    (1/n) sum_i (x_i - u_i)^2 + lam * sum_{i<j} s_ij |u_i - u_j|

whose solution path is piecewise linear in ``lam``.  While the cluster
memberships are fixed, stationarity gives every cluster ``k`` the value

    u_k(lam) = mean_k + slope_k * lam,
    slope_k  = -(n / (2 |I_k|)) sum_v s_kv sgn(u_k - u_v),

so the next breakpoint is the earliest meeting time of two graph-adjacent
clusters.  Merging two clusters leaves the slopes of all other clusters
unchanged and gives the merged cluster the size-weighted mean slope, which is
what makes an event queue with lazy invalidation run in ``O(n log n)`` for
sparse graphs.  The per-dimension merge trees are combined by taking, for
every pair, the largest merge ``lam`` over dimensions followed by single
linkage; the final partition is picked by the silhouette score.
"""

from __future__ import annotations

import heapq
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import squareform

from . import _kernels
from .errors import (
    DegenerateCutWarning,
    MaxIterExceededWarning,
    NoValidPartition,
    SuspectedSplitWarning,
)
from .metrics import SimilarityGraph

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12
SPLIT_TOL = 1e-3


def _edges(graph):
    if isinstance(graph, SimilarityGraph):
        return graph.n, graph.rows, graph.cols, graph.weights
    n, rows, cols, w = graph
    return int(n), np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), np.asarray(w, dtype=float)


# -- FISTA oracle / warm start -------------------------------------------------


def fista_warm_start(x, graph, lambda_plus, tol=1e-12, max_iter=100_000, z0=None, return_dual=False):
    """Solve the 1-D convex clustering problem at a fixed ``lambda_plus``.

    Accelerated projected gradient on the dual box problem with fixed step
    ``1/L``; stops when the duality gap drops below ``tol``.  On hitting
    ``max_iter`` the last iterate is returned with a
    :class:`MaxIterExceededWarning`.
    """
    x = np.ascontiguousarray(x, dtype=float)
    n, rows, cols, w = _edges(graph)
    if lambda_plus < 0:
        raise ValueError("lambda_plus must be nonnegative")
    z = np.zeros(len(w)) if z0 is None else np.array(z0, dtype=float)
    u, gap, it = _kernels.fista_dual(x, rows, cols, w, float(lambda_plus), z, int(max_iter), float(tol))
    if gap >= tol and lambda_plus > 0 and len(w):
        msg = f"FISTA stopped after {it} iterations with duality gap {gap:.3g}"
        warnings.warn(msg, MaxIterExceededWarning, stacklevel=2)
        logger.warning(msg)
    return (u, z) if return_dual else u


def objective(x, u, graph, lam):
    n, rows, cols, w = _edges(graph)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return float(np.sum((x - u) ** 2) / len(x) + lam * np.sum(w * np.abs(u[rows] - u[cols])))


# -- homotopy ------------------------------------------------------------------


@dataclass
class CentroidPath:
    """Piecewise-linear centroid paths of one latent dimension.

    Attributes
    ----------
    dimension : int
    x : ndarray
        Data values (path at ``lam = 0``).
    slopes0 : ndarray
        Initial slope of each singleton.
    events : list of tuple
        ``(lam, a, b, mean, slope)``: clusters ``a < b`` merge at ``lam`` into
        cluster ``a`` with the given mean and slope.  ``lam`` may be ``inf``
        for clusters in different graph components.
    """

    dimension: int
    x: np.ndarray
    slopes0: np.ndarray
    events: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.x)

    @property
    def breakpoints(self):
        return np.array([e[0] for e in self.events if math.isfinite(e[0])])

    def _replay(self, lam):
        parent = np.arange(self.n)
        mean = self.x.astype(float).copy()
        slope = self.slopes0.copy()
        for lam_e, a, b, m, s in self.events:
            if lam_e > lam:
                break
            parent[parent == b] = a
            mean[a], slope[a] = m, s
        return parent, mean, slope

    def values_at(self, lam):
        """Centroid of every subject at ``lam`` (closed form of the current segment)."""
        parent, mean, slope = self._replay(lam)
        return mean[parent] + slope[parent] * lam

    def labels_at(self, lam):
        parent, _, _ = self._replay(lam)
        return parent

    def segments(self):
        """List of ``(lam_lo, lam_hi, {cluster: (intercept, slope)})`` between breakpoints."""
        out = []
        parent = np.arange(self.n)
        state = {i: (float(self.x[i]), float(self.slopes0[i])) for i in range(self.n)}
        lo = 0.0
        for lam_e, a, b, m, s in self.events:
            if lam_e > lo:
                out.append((lo, lam_e, dict(state)))
                lo = lam_e
            del state[b]
            state[a] = (m, s)
            parent[parent == b] = a
        out.append((lo, math.inf, dict(state)))
        return out

    def merge_lambda_matrix(self):
        """``M[i, j]`` = smallest ``lam`` at which ``i`` and ``j`` share a centroid."""
        n = self.n
        M = np.zeros((n, n))
        members = {i: [i] for i in range(n)}
        for lam_e, a, b, _, _ in self.events:
            A, B = members[a], members.pop(b)
            M[np.ix_(A, B)] = lam_e
            M[np.ix_(B, A)] = lam_e
            A.extend(B)
        return M


class _Cluster:
    __slots__ = ("size", "total", "slope", "nbrs", "stamp", "born")

    def __init__(self, size, total, slope, nbrs, born):
        self.size = size
        self.total = total
        self.slope = slope
        self.nbrs = nbrs
        self.stamp = 0
        self.born = born

    def value(self, lam):
        return self.total / self.size + self.slope * lam


def _meet(ca, cb, lam):
    """Time at which two adjacent clusters meet, or ``inf``."""
    va, vb = ca.value(lam), cb.value(lam)
    diff = vb - va
    scale = max(1.0, abs(va), abs(vb))
    if abs(diff) <= TIE_TOL * scale:
        return lam
    rel = ca.slope - cb.slope
    if diff * rel <= 0.0:
        return math.inf
    return lam + diff / rel


def next_breakpoint(clusters, lam_now, n=None):
    """Smallest meeting time among graph-adjacent cluster pairs.

    ``clusters`` maps id -> ``(value_at_lam_now, size, neighbours)`` where
    ``neighbours`` maps id -> aggregated weight.  Returns ``(lam_next, (a, b))``
    with ``a < b``, or ``(inf, None)``.  Ties within ``1e-12`` go to the pair
    with the smallest ``(a, b)``.
    """
    ids = sorted(clusters)
    n = n if n is not None else sum(clusters[k][1] for k in ids)
    slopes = {}
    for k in ids:
        val, size, nb = clusters[k]
        acc = sum(w * np.sign(val - clusters[v][0]) for v, w in nb.items())
        slopes[k] = -(n / (2.0 * size)) * acc
    best = (math.inf, None)
    for k in ids:
        for v in clusters[k][2]:
            if v <= k:
                continue
            diff = clusters[v][0] - clusters[k][0]
            rel = slopes[k] - slopes[v]
            if abs(diff) <= TIE_TOL:
                lam = lam_now
            elif diff * rel > 0:
                lam = lam_now + diff / rel
            else:
                continue
            cand = (lam, (k, v))
            if best[1] is None or lam < best[0] - TIE_TOL or (abs(lam - best[0]) <= TIE_TOL and (k, v) < best[1]):
                best = cand
    return best


def homotopy_path(x, graph, dimension: int = 0, verify_fista: bool = False) -> CentroidPath:
    """Trace the full solution path from ``lam = 0`` until one cluster remains.

    Only graph-adjacent cluster pairs produce events; events are stamped
    with the cluster versions and discarded on pop when stale.  Components
    that never meet are merged at ``lam = inf`` (lowest ids first) so the
    merge tree is always complete.
    """
    x = np.asarray(x, dtype=float)
    n, rows, cols, w = _edges(graph)
    if len(x) != n:
        raise ValueError(f"graph has {n} nodes but x has {len(x)} entries")
    nbrs = [dict() for _ in range(n)]
    for r, c, s in zip(rows.tolist(), cols.tolist(), w.tolist()):
        if r == c or s <= 0:
            continue
        nbrs[r][c] = nbrs[r].get(c, 0.0) + s
        nbrs[c][r] = nbrs[c].get(r, 0.0) + s
    half_n = 0.5 * n
    slopes0 = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j, s in nbrs[i].items():
            acc += s * np.sign(x[i] - x[j])
        slopes0[i] = -half_n * acc
    cl = {i: _Cluster(1, float(x[i]), float(slopes0[i]), nbrs[i], 0.0) for i in range(n)}
    heap = []

    def push(a, b, lam):
        if a > b:
            a, b = b, a
        t = _meet(cl[a], cl[b], lam)
        if math.isfinite(t):
            heapq.heappush(heap, (t, a, b, cl[a].stamp, cl[b].stamp))

    for i in range(n):
        for j in nbrs[i]:
            if i < j:
                push(i, j, 0.0)

    path = CentroidPath(dimension, x.copy(), slopes0.copy())
    lam = 0.0
    while heap:
        t, a, b, sa, sb = heapq.heappop(heap)
        if a not in cl or b not in cl or cl[a].stamp != sa or cl[b].stamp != sb:
            continue
        # resolve near-ties deterministically by the smallest pair
        ties = [(t, a, b, sa, sb)]
        while heap and heap[0][0] <= t + TIE_TOL * max(1.0, abs(t)):
            ties.append(heapq.heappop(heap))
        ties.sort(key=lambda e: (e[1], e[2]))
        chosen = None
        for e in ties:
            if chosen is None and e[1] in cl and e[2] in cl and cl[e[1]].stamp == e[3] and cl[e[2]].stamp == e[4]:
                chosen = e
            else:
                heapq.heappush(heap, e)
        t, a, b, _, _ = chosen
        lam = max(lam, t)
        A, B = cl[a], cl.pop(b)
        size = A.size + B.size
        total = A.total + B.total
        slope = (A.size * A.slope + B.size * B.slope) / size
        # smaller neighbour map merged into the larger one
        big, small = (A.nbrs, B.nbrs) if len(A.nbrs) >= len(B.nbrs) else (B.nbrs, A.nbrs)
        for v, s in small.items():
            big[v] = big.get(v, 0.0) + s
        big.pop(a, None)
        big.pop(b, None)
        for v, s in big.items():
            nv = cl[v].nbrs
            sv = nv.pop(b, 0.0) + nv.pop(a, 0.0)
            nv[a] = sv
        A.size, A.total, A.slope, A.nbrs = size, total, slope, big
        A.stamp += 1
        path.events.append((lam, a, b, total / size, slope))
        for v in big:
            push(a, v, lam)
        if verify_fista and len(path.events) < n:
            _verify_breakpoint(path, graph, lam)

    # disconnected components: merge at infinity
    rest = sorted(cl)
    root = rest[0] if rest else None
    for b in rest[1:]:
        A, B = cl[root], cl.pop(b)
        size = A.size + B.size
        A.size, A.total = size, A.total + B.total
        A.slope = 0.0
        path.events.append((math.inf, root, b, A.total / size, 0.0))
    return path


def _verify_breakpoint(path, graph, lam):
    u_h = path.values_at(lam)
    u_f = fista_warm_start(path.x, graph, lam, tol=1e-12)
    dev = float(np.max(np.abs(u_h - u_f)))
    if dev > SPLIT_TOL:
        msg = f"dimension {path.dimension}: homotopy deviates from FISTA by {dev:.3g} at lam={lam:.6g} (suspected split)"
        warnings.warn(msg, SuspectedSplitWarning, stacklevel=3)
        logger.warning(msg)
    return dev


def max_fista_deviation(path: CentroidPath, graph, lambdas, tol=1e-12):
    """Largest ``|u_homotopy - u_fista|`` over ``lambdas`` (warm-started in order)."""
    z = None
    worst = 0.0
    for lam in sorted(lambdas):
        u_f, z = fista_warm_start(path.x, graph, lam, tol=tol, z0=z, return_dual=True)
        worst = max(worst, float(np.max(np.abs(path.values_at(lam) - u_f))))
    return worst


# -- hierarchy and partition selection -----------------------------------------


@dataclass
class MergeHierarchy:
    """Single-linkage tree over the joint (all-dimension) merge ``lam``."""

    n: int
    linkage: np.ndarray
    joint_lambda: np.ndarray

    def partition(self, K):
        """Labels for ``K`` clusters, numbered by first appearance."""
        if not 1 <= K <= self.n:
            raise ValueError(f"K={K} outside [1, {self.n}]")
        if self.n == 1:
            return np.zeros(1, dtype=int)
        raw = cut_tree(self.linkage, n_clusters=K).ravel()
        return _relabel(raw)

    def lambda_for(self, K):
        """Joint ``lam`` at which the ``K``-cluster partition becomes active."""
        if K >= self.n:
            return 0.0
        return float(self.linkage[self.n - K - 1, 2])


def _relabel(labels):
    mapping = {}
    out = np.empty(len(labels), dtype=int)
    for i, l in enumerate(labels):
        out[i] = mapping.setdefault(l, len(mapping))
    return out


def joint_hierarchy(paths: Sequence[CentroidPath]) -> MergeHierarchy:
    """Combine per-dimension paths: per-pair max merge ``lam``, then single linkage."""
    if not paths:
        raise ValueError("need at least one path")
    n = paths[0].n
    M = np.zeros((n, n))
    for p in paths:
        if p.n != n:
            raise ValueError("paths cover different numbers of subjects")
        np.maximum(M, p.merge_lambda_matrix(), out=M)
    finite = M[np.isfinite(M)]
    big = (finite.max() if finite.size else 0.0) * 2.0 + 1.0
    D = np.where(np.isfinite(M), M, big)
    np.fill_diagonal(D, 0.0)
    if n == 1:
        return MergeHierarchy(1, np.zeros((0, 4)), M)
    Z = linkage(squareform(D, checks=False), method="single")
    return MergeHierarchy(n, Z, M)


@dataclass
class ClusterResult:
    labels: np.ndarray
    K: int
    scores: dict
    lam: Optional[float] = None


def _scores(X, labels):
    from sklearn.metrics import calinski_harabasz_score, davies_bouldin_score, silhouette_score
    return (float(silhouette_score(X, labels)), float(davies_bouldin_score(X, labels)),
            float(calinski_harabasz_score(X, labels)))


def select_partition(h: MergeHierarchy, X, k_range, k_fixed: Optional[int] = None) -> ClusterResult:
    """Cut the hierarchy for each ``K`` and keep the silhouette maximizer.

    Davies-Bouldin and Calinski-Harabasz are reported alongside.  Ties in
    silhouette go to the smaller ``K``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if k_fixed is not None:
        labels = h.partition(int(k_fixed))
        scores = {}
        if 2 <= k_fixed <= n - 1 and np.ptp(X, axis=0).max() > 0:
            scores[int(k_fixed)] = _scores(X, labels)
        return ClusterResult(labels, int(k_fixed), scores, h.lambda_for(int(k_fixed)))
    if np.all(np.ptp(X, axis=0) == 0):
        raise NoValidPartition("all embedded points coincide; silhouette is undefined")
    scores = {}
    best = None
    for K in k_range:
        K = int(K)
        if K < 2 or K > n - 1:
            msg = f"K={K} outside [2, n-1] for n={n}; skipped"
            warnings.warn(msg, DegenerateCutWarning, stacklevel=2)
            continue
        labels = h.partition(K)
        if np.bincount(labels).max() == 1:
            warnings.warn(f"K={K} cut is all singletons; skipped", DegenerateCutWarning, stacklevel=2)
            continue
        sc = _scores(X, labels)
        scores[K] = sc
        if best is None or sc[0] > best[1] + 1e-12:
            best = (K, sc[0], labels)
    if best is None:
        raise NoValidPartition(f"no admissible K in {list(k_range)} for n={n}")
    K, _, labels = best
    return ClusterResult(labels, K, scores, h.lambda_for(K))


def cluster_embedding(X, graph, k_range, k_fixed=None, verify_fista=False):
    """Homotopy per latent dimension, joint hierarchy and silhouette selection."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    paths = [homotopy_path(X[:, d], graph, dimension=d, verify_fista=verify_fista) for d in range(X.shape[1])]
    h = joint_hierarchy(paths)
    return select_partition(h, X, k_range, k_fixed), h, paths
