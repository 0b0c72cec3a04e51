"""Acceptance checks.

Each test prints one ``PASS``/``FAIL`` line (run with ``-s`` to see them
inline; they are also repeated in the terminal summary).  The Monte Carlo
checks are marked ``slow``; deselect them with ``-m "not slow"``.
"""

import json
import math
import time
import warnings

import numpy as np
import pytest
from scipy.interpolate import PchipInterpolator
from scipy.stats import spearmanr
from sklearn.neighbors import NearestNeighbors

import oracles
from faeclust import network as nw
from faeclust.cli import main
from faeclust.config import FitConfig, NetConfig
from faeclust.cvxclust import homotopy_path, max_fista_deviation
from faeclust.datagen import SimSpec, WarpSpec, generate
from faeclust.errors import SuspectedSplitWarning
from faeclust.fdata import SamplePath, build_basis, smooth, smooth_all
from faeclust.metrics import (
    _n_components,
    dtw_exact,
    elastic_distance,
    fast_dtw,
    hilbert_distance,
    srv_transform,
    uniform_grid,
)
from faeclust.pipeline import ami, ari, fit

from test_pipeline import MICRO

DATA = __import__("pathlib").Path(__file__).parent / "data"


# -- 1. gradient oracle --------------------------------------------------------


def _fd_worst(f, params, analytic, h=1e-5, skip=None):
    worst = 0.0
    for k, v in params.items():
        for idx in np.ndindex(v.shape):
            if skip is not None and skip(k, v[idx]):
                continue
            pp = {kk: vv.copy() for kk, vv in params.items()}
            pp[k][idx] += h
            up = f(pp)
            pp[k][idx] -= 2 * h
            fd = (up - f(pp)) / (2 * h)
            an = analytic[k][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_gradient_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = NetConfig(layer_widths=[3, 2, 2, 2, 3], latent_dim=2, net_basis_size=4, tau=1.0, batch_size=8,
                    batch_norm=True)
    net = nw.FaeNetwork(cfg, build_basis("bspline", 8, 3), 1)
    net.set_params({k: v + 0.3 * rng.normal(size=v.shape) for k, v in net.params.items()})
    for k in net.running:
        net.running[k] = net.running[k] + 0.2 * rng.random(net.running[k].shape)
    C = rng.normal(size=(5, 1, 8))
    labels = np.array([0, 0, 1, 1, 1])

    def terms(params):
        old, net.params = net.params, params
        *_, cache = nw.forward(net, C, "eval", bn_stats="running", update_running=False)
        out = nw.loss_terms(net, cache, labels)
        net.params = old
        return out

    *_, cache = nw.forward(net, C, "eval", bn_stats="running", update_running=False)
    g00 = nw.backward(net, cache, labels, nw.LossWeights(0.0, 0.0))
    g10 = nw.backward(net, cache, labels, nw.LossWeights(1.0, 0.0))
    g01 = nw.backward(net, cache, labels, nw.LossWeights(0.0, 1.0))
    diff = lambda a, b: {k: a[k] - b[k] for k in a}
    # the l1 term is differentiable only away from zero
    nonzero = lambda k, v: k in nw.DECODER_KEYS and abs(v) < 1e-3

    enc = {"enc_W": net.params["enc_W"]}
    worst = {
        "L_r": _fd_worst(lambda p: terms(p)["L_r"], net.params, g00),
        "L_orth": _fd_worst(lambda p: nw.orthogonality_penalty(p["enc_W"], net.gram), enc,
                            {"enc_W": nw.orthogonality_grad(net.params["enc_W"], net.gram)}),
        "L_l1": _fd_worst(nw.roughness_penalty, net.params,
                          {**{k: np.zeros_like(v) for k, v in net.params.items()}, **nw.roughness_grad(net.params)},
                          skip=nonzero),
        "L_w via backward": _fd_worst(lambda p: terms(p)["L_w"], net.params, diff(g10, g00), skip=nonzero),
        "L_c via backward": _fd_worst(lambda p: terms(p)["L_c"], net.params, diff(g01, g00)),
    }
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record("gradient oracle", ok, f"worst relative error {detail} (tol 1e-4); {elapsed:.1f}s (limit 10s)")


# -- 2-4. homotopy ---------------------------------------------------------------


def _mutual_knn(x):
    """Smallest mutual-kNN graph (m >= 3) on the values of x that is connected."""
    n = len(x)
    D = np.abs(x[:, None] - x[None, :])
    order = np.argsort(D, axis=1, kind="stable")[:, 1:]
    for m in range(3, n):
        A = np.zeros((n, n), dtype=bool)
        A[np.repeat(np.arange(n), m), order[:, :m].ravel()] = True
        r, c = np.nonzero(np.triu(A & A.T, 1))
        if _n_components(n, r, c) == 1:
            break
    d = D[r, c]
    return n, r, c, np.exp(-d / np.median(d))


def test_homotopy_matches_fista(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    devs, splits = [], 0
    for _ in range(20):
        x = rng.normal(size=20)
        g = _mutual_knn(x)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            path = homotopy_path(x, g, verify_fista=True)
            lams = np.linspace(0.0, 1.1 * path.breakpoints.max(), 50)
            devs.append(max_fista_deviation(path, g, lams, tol=1e-10))
        splits += any(issubclass(w.category, SuspectedSplitWarning) for w in caught)
    elapsed = time.perf_counter() - t0
    devs = np.array(devs)
    n_bad = int(np.sum(devs > 1e-4))
    ok = n_bad <= 2 and splits <= 2 and n_bad <= splits and elapsed < 30
    assert record("homotopy vs FISTA", ok,
                  f"max deviation {devs.max():.1e}, {n_bad}/20 above 1e-4, {splits} logged splits (max 2); "
                  f"{elapsed:.1f}s (limit 30s)")


def test_homotopy_hand_cases(record):
    two = homotopy_path(np.array([0.0, 2.0]), (2, [0], [1], [1.0]))
    e2 = abs(two.breakpoints[0] - 1.0) + float(np.max(np.abs(two.values_at(1.0) - 1.0)))
    r, c = np.triu_indices(3, 1)
    three = homotopy_path(np.array([0.0, 1.0, 2.0]), (3, r, c, np.ones(3)))
    lam, a, b = three.events[0][:3]
    e3 = abs(lam - 1 / 3)
    ok = e2 < 1e-9 and e3 < 1e-9 and (a, b) == (0, 1) and len(two.breakpoints) == 1
    assert record("homotopy hand cases", ok,
                  f"n=2 breakpoint/centroid error {e2:.1e}; n=3 first merge at {lam:.12f} pair ({a},{b}) (tol 1e-9)")


def _knn_graph_1d(x, m=10):
    n = len(x)
    _, idx = NearestNeighbors(n_neighbors=m + 1).fit(x[:, None]).kneighbors(x[:, None])
    r = np.repeat(np.arange(n), m)
    c = idx[:, 1:].ravel()
    lo, hi = np.minimum(r, c), np.maximum(r, c)
    key = np.unique(lo * n + hi)
    r, c = key // n, key % n
    d = np.abs(x[r] - x[c])
    return n, r, c, np.exp(-d / np.median(d))


def test_homotopy_scaling(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    sizes = [100, 400, 1600, 6400]
    times = []
    for n in sizes:
        x = rng.normal(size=n)
        g = _knn_graph_1d(x)
        best = math.inf
        for _ in range(3):
            s = time.perf_counter()
            homotopy_path(x, g)
            best = min(best, time.perf_counter() - s)
        times.append(best)
    model = np.array([n * math.log(n) for n in sizes])
    times = np.array(times)
    c = float(np.sum(times * model) / np.sum(model * model))
    ratios = times / (c * model)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all((ratios >= 0.5) & (ratios <= 2.0))) and elapsed < 120
    assert record("homotopy n log n scaling", ok,
                  f"times {np.round(times, 4).tolist()}s, ratio to c*n*log n {np.round(ratios, 2).tolist()} "
                  f"(within [0.5, 2]); {elapsed:.1f}s (limit 120s)")


# -- 5-7. distances and clustering loss -----------------------------------------


def _random_warp(rng, k=4, r=2.0):
    knots = np.linspace(0, 1, k + 1)
    while True:
        slopes = np.exp(rng.uniform(-math.log(r), math.log(r), k))
        h = PchipInterpolator(knots, np.r_[0.0, np.cumsum(slopes) / slopes.sum()])
        d = h.derivative()(np.linspace(0, 1, 1001))
        if d.min() >= 1 / r and d.max() <= r:
            return h


def test_elastic_warp_recovery(record):
    basis = build_basis("bspline", 40, 3)
    gen = build_basis("bspline", 8, 3)
    tt = np.linspace(0, 1, 2001)
    Ns = [64, 128, 256, 512]
    rel, rhos, ratios = [], [], []
    for case in range(10):
        rng = np.random.default_rng(100 + case)
        coef = rng.normal(size=(2, 8))
        h = _random_warp(rng)
        f = smooth(SamplePath(case, tt, (coef @ gen.evaluate(tt).T).T), basis, 1e-10)
        fw = smooth(SamplePath(case, tt, (coef @ gen.evaluate(h(tt)).T).T), basis, 1e-10)
        d = [elastic_distance(fw, f, N) for N in Ns]
        grid = uniform_grid(basis, 512)
        q = srv_transform(f, grid)
        norm_q = math.sqrt(np.trapezoid(np.sum(q * q, axis=0), grid))
        rel.append(d[-1] / norm_q)
        rhos.append(spearmanr(Ns, d)[0])
        ratios.append(hilbert_distance(f, fw) / d[-1])
    rel, rhos, ratios = map(np.array, (rel, rhos, ratios))
    ok = rel.max() <= 0.02 and rhos.max() < -0.9 and np.sum(ratios > 10) >= 8
    assert record("elastic warp recovery", ok,
                  f"max d/||q|| at N=512 {rel.max():.4f} (tol 0.02); Spearman rho(N, d) per case max {rhos.max():.2f} "
                  f"(tol < -0.9); Hilbert > 10x elastic in {np.sum(ratios > 10)}/10 (need 8)")


def test_dtw_against_textbook_recursion(record):
    rng = np.random.default_rng(11)
    err_full, err_r4 = 0.0, 0.0
    for _ in range(10):
        a = np.cumsum(rng.normal(size=(64, 2)), axis=0)
        b = np.cumsum(rng.normal(size=(64, 2)), axis=0)
        ref = oracles.dtw(a.tolist(), b.tolist())
        err_full = max(err_full, abs(fast_dtw(a, b, radius=64)[0] - ref), abs(dtw_exact(a, b) - ref))
        err_r4 = max(err_r4, (fast_dtw(a, b, radius=4)[0] - ref) / ref)
    ok = err_full <= 1e-9 and 0 <= err_r4 <= 0.05
    assert record("DTW", ok, f"radius=N abs error {err_full:.1e} (tol 1e-9); radius 4 relative excess "
                             f"{err_r4:.3%} (tol 5%)")


def test_clustering_loss_identity(record):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        n, s, K = rng.integers(3, 30), rng.integers(1, 5), rng.integers(1, 6)
        X = rng.normal(size=(n, s)) * rng.uniform(0.1, 5)
        labels = rng.integers(0, K, n)
        worst = max(worst, abs(nw.clustering_loss(X, labels) - oracles.clustering_loss(X.tolist(), labels.tolist())))
    assert record("clustering loss identity", worst <= 1e-10, f"max abs difference {worst:.1e} (tol 1e-10)")


# -- 8. decoder capacity ---------------------------------------------------------


def test_decoder_capacity(record):
    t0 = time.perf_counter()
    basis = build_basis("bspline", 12, 3)
    rng = np.random.default_rng(0)
    t = np.linspace(0, 1, 60)
    target = lambda x, s: x[:, :1] * np.sin(2 * np.pi * s) + x[:, 1:] * s ** 2

    def coeffs(x):
        return np.stack([smooth(SamplePath(i, t, target(x[i:i + 1], t)[0]), basis, 1e-8).coeffs
                         for i in range(len(x))])

    x = rng.uniform(-1, 1, size=(256, 2))
    net = nw.FaeNetwork(NetConfig(layer_widths=[4, 4, 2, 4, 2, 16, 16], latent_dim=2, batch_size=16), basis, 1)
    nw.fit_decoder(net, x, coeffs(x), epochs=150, alpha=0.5)
    xt = rng.uniform(-1, 1, size=(200, 2))
    truth = target(xt, net.quad_nodes)[:, None, :]
    err = nw.reconstruction_loss(truth, nw.decode(net, xt), net.quad_w)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-2 and elapsed < 300
    assert record("decoder capacity", ok, f"held-out mean squared error {err:.2e} (tol 1e-2); {elapsed:.1f}s "
                                          f"(limit 300s)")


# -- 9-11. Monte Carlo clustering quality -----------------------------------------


def _run(kind, seed, metric="hilbert_l2", warp=None):
    paths, truth = generate(SimSpec(kind, seed=seed, noise_sigma=0.05), warp=warp)
    ds = smooth_all(paths, build_basis("bspline", 20, 3), 1e-4)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, res, _ = fit(ds, NetConfig(), FitConfig(seed=seed, metric=metric))
    return ami(truth, res.labels), res.K, time.perf_counter() - t0


@pytest.mark.slow
def test_pendulum_recovery(record):
    runs = np.array([_run("pendulum", s) for s in range(100)])
    hits = int(np.sum(runs[:, 0] >= 0.9))
    med_K = float(np.median(runs[:, 1]))
    ok = hits >= 80 and med_K == 4 and runs[:, 2].max() < 60
    assert record("pendulum recovery", ok,
                  f"{hits}/100 runs with AMI >= 0.9 (need 80); median K {med_K:g} (need 4); "
                  f"median AMI {np.median(runs[:, 0]):.3f}; slowest run {runs[:, 2].max():.1f}s (limit 60s)")


@pytest.mark.slow
def test_warp_robustness(record):
    diffs = []
    for s in range(20):
        plain = _run("pendulum", s, metric="dtw_fast")[0]
        warped = _run("pendulum", s, metric="dtw_fast", warp=WarpSpec(4, 2.0, seed=s))[0]
        diffs.append(abs(plain - warped))
    med = float(np.median(diffs))
    assert record("warp robustness", med <= 0.1,
                  f"median |AMI unwarped - AMI warped| {med:.3f} over 20 seeds (tol 0.1); max {max(diffs):.3f}")


@pytest.mark.slow
def test_hypersphere_recovery(record):
    scores = np.array([_run("hypersphere", s)[0] for s in range(100)])
    med = float(np.median(scores))
    assert record("hypersphere recovery", med >= 0.55,
                  f"median AMI {med:.3f} over 100 seeds (need 0.55); quartiles "
                  f"{np.percentile(scores, 25):.3f}/{np.percentile(scores, 75):.3f}")


# -- 12. scores ------------------------------------------------------------------


def test_ami_ari_oracles(record):
    worst = 0.0
    for a, b in MICRO:
        worst = max(worst, abs(ami(a, b) - oracles.ami(a, b)), abs(ari(a, b) - oracles.ari(a, b)))
    rng = np.random.default_rng(13)
    perm_worst = 0.0
    for _ in range(100):
        a, b = rng.integers(0, 4, 30), rng.integers(0, 3, 30)
        p = rng.permutation(4)
        perm_worst = max(perm_worst, abs(ami(p[a], b) - ami(a, b)), abs(ari(p[a], b) - ari(a, b)))
    ok = worst <= 1e-9 and perm_worst <= 1e-12
    assert record("AMI/ARI", ok, f"max deviation from combinatorial oracles {worst:.1e} (tol 1e-9); "
                                 f"permutation change {perm_worst:.1e} over 100 labelings")


# -- 13. CLI reproducibility and a real-format fixture -------------------------------


def test_cli_fit_reproducible(record, tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"basis": {"kind": "bspline", "m": 20, "degree": 3}, "lambda_s": 1e-4}))
    rc = [main(["simulate", "--kind", "pendulum", "--seed", "0", "--noise", "0.05",
                "--out", str(tmp_path / "data.csv"), "--truth", str(tmp_path / "truth.csv")])]
    for out in ("a", "b"):
        rc.append(main(["fit", "--data", str(tmp_path / "data.csv"), "--manifest", str(manifest),
                        "--seed", "0", "--out", str(tmp_path / out)]))
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("labels.csv", "report.json")}
    ok = rc == [0, 0, 0] and all(same.values())
    assert record("CLI fit reproducibility", ok, f"exit codes {rc}; byte-identical {same}")


def test_cli_fit_on_archive_fixture(record, tmp_path, capsys):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"basis": {"kind": "bspline", "m": 24, "degree": 3}, "lambda_s": 1e-4}))
    rc = main(["fit", "--data", str(DATA / "cbf_long.csv"), "--manifest", str(manifest), "--seed", "0",
               "--out", str(tmp_path / "cbf")])
    capsys.readouterr()
    rc_eval = main(["evaluate", "--pred", str(tmp_path / "cbf" / "labels.csv"), "--truth", str(DATA / "cbf_labels.csv")])
    scores = json.loads(capsys.readouterr().out) if rc_eval == 0 else {}
    ok = rc == 0 and rc_eval == 0
    with capsys.disabled():
        assert record("archive-format fixture through CLI fit", ok,
                      f"fit exit {rc}, evaluate exit {rc_eval}; scores {scores} (informational)")
