"""Compiled kernels: DTW and elastic alignment, dual FISTA, ODE integration."""

import math

import numpy as np
from numba import njit

_INF = np.inf


@njit(cache=True)
def _sqdist(a, i, b, j):
    s = 0.0
    for d in range(a.shape[1]):
        diff = a[i, d] - b[j, d]
        s += diff * diff
    return s


@njit(cache=True)
def dtw_ranges(a, b, lo, hi):
    """DTW cost restricted to per-row column ranges ``lo[i] <= j <= hi[i]``.

    Step pattern (1,0), (0,1), (1,1); local cost is the squared Euclidean
    distance; returns ``(cost, path)`` with path as an (L, 2) int array.
    """
    n = a.shape[0]
    m = b.shape[0]
    D = np.full((n + 1, m + 1), _INF)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(lo[i - 1] + 1, hi[i - 1] + 2):
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            if best < _INF:
                D[i, j] = best + _sqdist(a, i - 1, b, j - 1)
    # backtrack
    path = np.empty((n + m, 2), dtype=np.int64)
    k = 0
    i, j = n, m
    while i > 0 and j > 0:
        path[k, 0] = i - 1
        path[k, 1] = j - 1
        k += 1
        d = D[i - 1, j - 1]
        up = D[i - 1, j]
        left = D[i, j - 1]
        if d <= up and d <= left:
            i -= 1
            j -= 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
    out = np.empty((k, 2), dtype=np.int64)
    for t in range(k):
        out[t, 0] = path[k - 1 - t, 0]
        out[t, 1] = path[k - 1 - t, 1]
    return D[n, m], out


@njit(cache=True)
def dtw_band(a, b, band, cutoff):
    """Sakoe-Chiba banded DTW with early abandoning above ``cutoff``."""
    n = a.shape[0]
    m = b.shape[0]
    prev = np.full(m + 1, _INF)
    cur = np.full(m + 1, _INF)
    prev[0] = 0.0
    for i in range(1, n + 1):
        for j in range(m + 1):
            cur[j] = _INF
        centre = (i - 1) * (m - 1) / max(n - 1, 1)
        jlo = max(0, int(math.floor(centre - band)))
        jhi = min(m - 1, int(math.ceil(centre + band)))
        row_min = _INF
        for j in range(jlo + 1, jhi + 2):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            if best < _INF:
                cur[j] = best + _sqdist(a, i - 1, b, j - 1)
                if cur[j] < row_min:
                    row_min = cur[j]
        if row_min > cutoff:
            return _INF
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


@njit(cache=True)
def lb_keogh(a, b, band):
    """LB_Keogh lower bound of banded DTW(a, b) using the envelope of ``b``."""
    n = a.shape[0]
    m = b.shape[0]
    total = 0.0
    for i in range(n):
        centre = i * (m - 1) / max(n - 1, 1)
        jlo = max(0, int(math.floor(centre - band)))
        jhi = min(m - 1, int(math.ceil(centre + band)))
        for d in range(a.shape[1]):
            lo = _INF
            hi = -_INF
            for j in range(jlo, jhi + 1):
                v = b[j, d]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            x = a[i, d]
            if x > hi:
                total += (x - hi) * (x - hi)
            elif x < lo:
                total += (lo - x) * (lo - x)
    return total


@njit(cache=True)
def _segment_cross(q1, q2, k, l, i, j, h):
    """Trapezoid value of int q1(t) . q2(s(t)) sqrt(s'(t)) dt along a straight segment.

    The segment runs from grid cell (k, l) to (i, j); both SRVs are linearly
    interpolated at the sub-steps.  The rule is symmetric in (q1, q2).
    """
    a = i - k
    b = j - l
    steps = a if a > b else b
    scale = math.sqrt(a * h * b * h) / steps
    total = 0.0
    p = q1.shape[1]
    for r in range(steps + 1):
        u = r / steps
        tpos = k + u * a
        spos = l + u * b
        t0 = int(math.floor(tpos))
        s0 = int(math.floor(spos))
        if t0 >= q1.shape[0] - 1:
            t0 = q1.shape[0] - 2
        if s0 >= q2.shape[0] - 1:
            s0 = q2.shape[0] - 2
        ft = tpos - t0
        fs = spos - s0
        dot = 0.0
        for d in range(p):
            v1 = (1 - ft) * q1[t0, d] + ft * q1[t0 + 1, d]
            v2 = (1 - fs) * q2[s0, d] + fs * q2[s0 + 1, d]
            dot += v1 * v2
        w = 0.5 if (r == 0 or r == steps) else 1.0
        total += w * dot
    return total * scale


@njit(cache=True)
def elastic_dp(q1, q2, h, nbrs):
    """Maximal warped cross term between two SRVs sampled on a uniform grid.

    Paths move from (0, 0) to (N-1, N-1) through steps in ``nbrs`` (positive
    integer pairs).  Returns ``(value, path)`` where value is the largest
    discretized ``<q1, (q2 o g) sqrt(g')>`` over such piecewise-linear warps
    and path is the (L, 2) array of visited grid cells.
    """
    n = q1.shape[0]
    E = np.full((n, n), -_INF)
    P = np.full((n, n), -1, dtype=np.int64)
    E[0, 0] = 0.0
    for i in range(1, n):
        for j in range(1, n):
            best = -_INF
            arg = -1
            for s in range(nbrs.shape[0]):
                k = i - nbrs[s, 0]
                l = j - nbrs[s, 1]
                if k < 0 or l < 0:
                    continue
                if E[k, l] == -_INF:
                    continue
                v = E[k, l] + _segment_cross(q1, q2, k, l, i, j, h)
                if v > best:
                    best = v
                    arg = s
            E[i, j] = best
            P[i, j] = arg
    path = np.empty((2 * n, 2), dtype=np.int64)
    c = 0
    i, j = n - 1, n - 1
    while True:
        path[c, 0] = i
        path[c, 1] = j
        c += 1
        if i == 0 and j == 0:
            break
        s = P[i, j]
        i -= nbrs[s, 0]
        j -= nbrs[s, 1]
    out = np.empty((c, 2), dtype=np.int64)
    for r in range(c):
        out[r, 0] = path[c - 1 - r, 0]
        out[r, 1] = path[c - 1 - r, 1]
    return E[n - 1, n - 1], out


@njit(cache=True)
def fista_dual(x, rows, cols, w, lam, z, max_iter, tol):
    """Accelerated projected gradient on the dual of the 1-D fused objective.

    Primal: ``(1/n)||x - u||^2 + lam * sum_e w_e |u_r(e) - u_c(e)|``.  With
    ``u = x - (n lam / 2) D^T W z`` and ``|z_e| <= 1``; ``z`` is updated in
    place (warm start).  Stops when the duality gap falls below ``tol``.
    Returns ``(u, gap, iterations)``.
    """
    n = x.shape[0]
    E = rows.shape[0]
    c = 0.5 * n * lam
    # Lipschitz constant of the dual gradient: c^2 ||D^T W||^2 <= c^2 * max_i 2 sum_{e ~ i} w_e^2
    deg = np.zeros(n)
    for e in range(E):
        deg[rows[e]] += w[e] * w[e]
        deg[cols[e]] += w[e] * w[e]
    L = 0.0
    for i in range(n):
        if deg[i] > L:
            L = deg[i]
    L = 2.0 * L * c * c
    u = x.copy()
    if E == 0 or lam == 0.0:
        return u, 0.0, 0
    y = z.copy()
    zprev = z.copy()
    t = 1.0
    uy = np.empty(n)
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        # u at the extrapolated point
        for i in range(n):
            uy[i] = x[i]
        for e in range(E):
            v = c * w[e] * y[e]
            uy[rows[e]] -= v
            uy[cols[e]] += v
        # gradient of 0.5||x - c D^T W y||^2 wrt y is -c W D u
        for e in range(E):
            g = -c * w[e] * (uy[rows[e]] - uy[cols[e]])
            zn = y[e] - g / L
            if zn > 1.0:
                zn = 1.0
            elif zn < -1.0:
                zn = -1.0
            zprev[e] = z[e]
            z[e] = zn
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / tn
        for e in range(E):
            y[e] = z[e] + mom * (z[e] - zprev[e])
        t = tn
        if it % 20 == 0 or it == max_iter:
            for i in range(n):
                u[i] = x[i]
            for e in range(E):
                v = c * w[e] * z[e]
                u[rows[e]] -= v
                u[cols[e]] += v
            # primal objective minus dual objective at (u(z), z)
            fit = 0.0
            for i in range(n):
                fit += (x[i] - u[i]) ** 2
            fit /= n
            pen = 0.0
            lin = 0.0
            for e in range(E):
                d = u[rows[e]] - u[cols[e]]
                pen += w[e] * abs(d)
                lin += w[e] * z[e] * d
            gap = lam * (pen - lin)
            if gap < tol:
                break
    for i in range(n):
        u[i] = x[i]
    for e in range(E):
        v = c * w[e] * z[e]
        u[rows[e]] -= v
        u[cols[e]] += v
    return u, gap, it


# -- ODE systems (0 = pendulum, 1 = Lorenz with sigma=10, beta=8/3) -------------


@njit(cache=True)
def ode_rhs(system, y, rho):
    out = np.empty(y.shape[0])
    if system == 0:
        out[0] = y[1]
        out[1] = -math.sin(y[0])
    else:
        out[0] = 10.0 * (y[1] - y[0])
        out[1] = y[0] * (rho - y[2]) - y[1]
        out[2] = y[0] * y[1] - (8.0 / 3.0) * y[2]
    return out


@njit(cache=True)
def rk4_system(system, y0, h, n_steps, rho):
    traj = np.empty((n_steps + 1, y0.shape[0]))
    traj[0] = y0
    y = y0.copy()
    for k in range(n_steps):
        k1 = ode_rhs(system, y, rho)
        k2 = ode_rhs(system, y + 0.5 * h * k1, rho)
        k3 = ode_rhs(system, y + 0.5 * h * k2, rho)
        k4 = ode_rhs(system, y + h * k3, rho)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        traj[k + 1] = y
    return traj


@njit(cache=True)
def ode_field(system, traj, rho):
    out = np.empty_like(traj)
    for i in range(traj.shape[0]):
        out[i] = ode_rhs(system, traj[i], rho)
    return out


@njit(cache=True)
def expand_window(path, n, m, radius):
    """Full-resolution column ranges from a half-resolution path widened by ``radius``."""
    nc = (n + 1) // 2
    mc = (m + 1) // 2
    clo = np.full(nc, mc, dtype=np.int64)
    chi = np.full(nc, -1, dtype=np.int64)
    for k in range(path.shape[0]):
        i = path[k, 0]
        j = path[k, 1]
        jl = max(0, j - radius)
        jh = min(mc - 1, j + radius)
        for r in range(max(0, i - radius), min(nc - 1, i + radius) + 1):
            if jl < clo[r]:
                clo[r] = jl
            if jh > chi[r]:
                chi[r] = jh
    lo = np.empty(n, dtype=np.int64)
    hi = np.empty(n, dtype=np.int64)
    for i in range(n):
        lo[i] = 2 * clo[i // 2]
        hi[i] = min(m - 1, 2 * chi[i // 2] + 1)
    # feasibility: monotone, overlapping ranges
    for i in range(n - 2, -1, -1):
        if lo[i + 1] < lo[i]:
            lo[i] = lo[i + 1]
    for i in range(1, n):
        if hi[i - 1] > hi[i]:
            hi[i] = hi[i - 1]
    lo[0] = 0
    hi[n - 1] = m - 1
    return lo, hi
