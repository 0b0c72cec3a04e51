"""``faeclust`` command line tool.

Subcommands: simulate, smooth, distances, fit, cluster, evaluate, replay.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Diagnostics go to standard error; results go to files (and, for
``evaluate``, standard output).  Every run that writes files also writes a
run manifest (``run.json`` inside an output directory, ``<file>.run.json``
next to an output file) from which ``replay`` reproduces the outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, FaeClustError, InvalidConfig, NumericalError

logger = logging.getLogger("faeclust")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flags whose values are output locations, per subcommand (True = directory)
OUTPUTS = {
    "simulate": {"--out": False, "--truth": False},
    "smooth": {"--out": True},
    "distances": {"--out": False, "--graph": False},
    "fit": {"--out": True},
    "cluster": {"--out": True},
}
# flags whose values are input files
INPUTS = ("--data", "--manifest", "--net", "--fitcfg", "--init-labels", "--embedding", "--graph-in",
          "--pred", "--truth-in")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_hash():
    """Short digest of the package sources (stable across machines)."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:12]


def _neighbors(value):
    if value in ("knee", "connectivity"):
        return value
    try:
        m = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'knee', 'connectivity' or a positive integer") from None
    if m < 1:
        raise argparse.ArgumentTypeError("neighbourhood size must be positive")
    return m


def make_parser():
    p = _Parser(prog="faeclust", description="Functional autoencoder clustering toolkit.")
    p.add_argument("--version", action="version", version=f"faeclust {__version__} (build {build_hash()})")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads (default: FAECLUST_THREADS or library default)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="generate a simulated dataset")
    s.add_argument("--kind", required=True, choices=["hypersphere", "hyperbolic", "swissroll", "lorenz", "pendulum"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--n-samples", type=int, default=None)
    s.add_argument("--out", required=True, help="long-format data CSV")
    s.add_argument("--truth", required=True, help="truth labels CSV")
    s.add_argument("--warp", action="store_true", help="apply random time warps")
    s.add_argument("--warp-knots", type=int, default=4)
    s.add_argument("--warp-ratio", type=float, default=2.0)

    s = sub.add_parser("smooth", help="basis-smooth a long-format dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--grid", type=int, default=100, help="points of the fitted-value grid")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("distances", help="pairwise distance matrix and similarity graph")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--metric", default="l2", choices=["l2", "srv", "dtw-fast", "dtw-ultra"])
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--radius", type=int, default=4)
    s.add_argument("--no-refine", action="store_true", help="skip elastic warp refinement")
    s.add_argument("--neighbors", type=_neighbors, default=10)
    s.add_argument("--raw-exp", action="store_true", help="weights exp(-d) instead of exp(-d/median)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="distance CSV (i,j,d)")
    s.add_argument("--graph", default=None, help="optional similarity graph CSV (i,j,s)")

    s = sub.add_parser("fit", help="train the autoencoder and cluster")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--net", default=None, help="network config JSON")
    s.add_argument("--fitcfg", default=None, help="fit config JSON")
    s.add_argument("--init-labels", default=None, help="optional initial labels CSV")
    s.add_argument("--seed", type=int, default=None, help="overrides the fit config seed")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("cluster", help="convex clustering of an embedding")
    s.add_argument("--embedding", required=True)
    s.add_argument("--graph", dest="graph_in", required=True, help="similarity graph CSV (i,j,s)")
    s.add_argument("--kmin", type=int, default=2)
    s.add_argument("--kmax", type=int, default=10)
    s.add_argument("--k-fixed", type=int, default=None)
    s.add_argument("--verify-fista", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("evaluate", help="AMI / ARI between two label files")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", dest="truth_in", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("replay", help="re-run a recorded command into a new location")
    s.add_argument("--manifest", dest="run_manifest", required=True, help="run manifest JSON")
    s.add_argument("--out", required=True, help="directory receiving the reproduced outputs")
    return p


# -- helpers -------------------------------------------------------------------


def _set_threads(n):
    if n is None:
        env = os.environ.get("FAECLUST_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"FAECLUST_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_dataset(data_path, manifest_path):
    from .config import DataManifest, load_json
    from .fdata import smooth_all, standardize
    from .io import read_long_csv

    manifest = DataManifest.from_dict(load_json(manifest_path))
    basis = manifest.build_basis()
    paths = read_long_csv(data_path)
    for sp in paths:
        sp.validate(basis.domain)
    ds = smooth_all(paths, basis, manifest.lambda_s)
    if manifest.standardize:
        ds = standardize(ds)
    return ds, manifest


def _write_manifest(args, argv, artifacts, config, seed, t0, location):
    from .io import write_json
    run = {
        "tool": "faeclust",
        "version": __version__,
        "build": build_hash(),
        "subcommand": args.command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "artifacts": {name: {"path": os.path.abspath(p), "sha256": _sha256(p)} for name, p in artifacts.items()},
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    write_json(location, run)
    return run


def _absolute_argv(argv):
    """Copy of ``argv`` with input and output paths made absolute (for replay)."""
    out = list(argv)
    flags = set(INPUTS) | {"--out", "--truth", "--graph"}
    for i, tok in enumerate(out[:-1]):
        if tok in flags:
            out[i + 1] = os.path.abspath(out[i + 1])
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args, argv, t0):
    from .datagen import SimSpec, WarpSpec, generate
    from .io import write_labels, write_long_csv

    spec = SimSpec(args.kind, n_samples=args.n_samples, noise_sigma=args.noise, seed=args.seed)
    warp = WarpSpec(args.warp_knots, args.warp_ratio, seed=args.seed) if args.warp else None
    paths, labels = generate(spec, warp)
    write_long_csv(args.out, paths)
    write_labels(args.truth, [sp.subject_id for sp in paths], labels)
    config = {"kind": spec.kind, "n_samples": spec.n_samples, "n_dims": spec.n_dims, "n_steps": spec.n_steps,
              "n_clusters": spec.n_clusters, "noise_sigma": spec.noise_sigma,
              "warp": None if warp is None else {"n_knots": warp.n_knots, "max_speed_ratio": warp.max_speed_ratio}}
    _write_manifest(args, argv, {"data": args.out, "truth": args.truth}, config, args.seed, t0,
                    args.out + ".run.json")
    return EXIT_OK


def cmd_smooth(args, argv, t0):
    from .fdata import evaluate
    from .io import atomic_write, write_long_csv
    from .fdata import SamplePath

    ds, manifest = _load_dataset(args.data, args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["subject_id,dim,k,coef"]
    for s in ds.samples:
        for d in range(s.p):
            lines.extend(f"{s.subject_id},{d},{k},{float(c)!r}" for k, c in enumerate(s.coeffs[d]))
    atomic_write(out / "coeffs.csv", "\n".join(lines) + "\n")
    grid = np.linspace(*ds.basis.domain, args.grid)
    fitted = [SamplePath(s.subject_id, grid, evaluate(s, grid).T) for s in ds.samples]
    write_long_csv(out / "fitted.csv", fitted)
    arts = {"coeffs": str(out / "coeffs.csv"), "fitted": str(out / "fitted.csv")}
    _write_manifest(args, argv, arts, manifest.to_dict(), args.seed, t0, out / "run.json")
    return EXIT_OK


def cmd_distances(args, argv, t0):
    from .io import write_pairs
    from .metrics import build_similarity_graph, pairwise_distances, select_neighborhood_size

    ds, manifest = _load_dataset(args.data, args.manifest)
    D = pairwise_distances(ds.samples, args.metric, N=args.grid, radius=args.radius, refine=not args.no_refine)
    n = D.n
    iu, ju = np.triu_indices(n, 1)
    write_pairs(args.out, iu, ju, D.values[iu, ju], names=("i", "j", "d"))
    arts = {"distances": args.out}
    config = {"manifest": manifest.to_dict(), "metric": D.metric_kind, "grid": args.grid, "radius": args.radius,
              "refine": not args.no_refine}
    if args.graph:
        m = args.neighbors
        if isinstance(m, str):
            m = select_neighborhood_size(D, m)
        g = build_similarity_graph(D, min(int(m), n - 1), raw_exp=args.raw_exp)
        write_pairs(args.graph, g.rows, g.cols, g.weights, names=("i", "j", "s"))
        arts["graph"] = args.graph
        config.update({"neighbors": g.m_nn, "raw_exp": args.raw_exp})
    _write_manifest(args, argv, arts, config, args.seed, t0, args.out + ".run.json")
    return EXIT_OK


def cmd_fit(args, argv, t0):
    from .config import FitConfig, NetConfig, load_json
    from .io import align_labels, read_labels, write_json, write_labels, write_matrix
    from .network import save_checkpoint
    from .pipeline import fit

    ds, manifest = _load_dataset(args.data, args.manifest)
    net_cfg = NetConfig.from_dict(load_json(args.net)) if args.net else NetConfig().validate()
    fit_cfg = FitConfig.from_dict(load_json(args.fitcfg)) if args.fitcfg else FitConfig().validate()
    if args.seed is not None:
        fit_cfg.seed = args.seed
    ids = np.asarray(ds.subject_ids, dtype=np.int64)
    init = None
    if args.init_labels:
        lid, lab = read_labels(args.init_labels)
        _, init = align_labels(ids, ids, lid, lab)
    net, result, report = fit(ds, net_cfg, fit_cfg, initial_labels=init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels.csv", ids, report.labels)
    write_matrix(out / "embedding.csv", ids, report.embedding)
    write_json(out / "report.json", report.to_dict())
    tmp = out / ".checkpoint.npz.tmp"
    save_checkpoint(net, tmp)
    os.replace(tmp, out / "checkpoint.npz")
    logger.info("fit: K=%d after %d loops (%s)", result.K, report.n_loops,
                "converged" if report.converged else "budget exhausted")
    arts = {k: str(out / f) for k, f in [("labels", "labels.csv"), ("embedding", "embedding.csv"),
                                         ("report", "report.json"), ("checkpoint", "checkpoint.npz")]}
    config = {"manifest": manifest.to_dict(), "net": net_cfg.to_dict(), "fit": fit_cfg.to_dict(),
              "wall_times": report.wall_times}
    _write_manifest(args, argv, arts, config, fit_cfg.seed, t0, out / "run.json")
    return EXIT_OK


def cmd_cluster(args, argv, t0):
    from .cvxclust import cluster_embedding
    from .errors import ShapeMismatch
    from .io import read_matrix, read_pairs, write_json, write_labels
    from .metrics import SimilarityGraph

    ids, X = read_matrix(args.embedding)
    rows, cols, w = read_pairs(args.graph_in, names=("i", "j", "s"))
    n = len(ids)
    if len(rows) and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= n):
        raise ShapeMismatch(f"graph indices must lie in [0, {n - 1}]")
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    graph = SimilarityGraph(n, lo, hi, w, 0)
    if args.kmin < 2 or args.kmax < args.kmin:
        raise UsageError("need 2 <= kmin <= kmax")
    res, h, _ = cluster_embedding(X, graph, range(args.kmin, args.kmax + 1), args.k_fixed, args.verify_fista)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels.csv", ids, res.labels)
    merges = [{"a": int(a), "b": int(b), "lambda": float(lam), "size": int(sz)} for a, b, lam, sz in h.linkage]
    write_json(out / "hierarchy.json", {"n": n, "merges": merges})
    write_json(out / "scores.json", {"K": res.K, "lambda": res.lam,
                                     "scores": {str(k): {"silhouette": v[0], "davies_bouldin": v[1],
                                                         "calinski_harabasz": v[2]} for k, v in res.scores.items()}})
    arts = {k: str(out / f"{k}.json" if k != "labels" else out / "labels.csv") for k in ("labels", "hierarchy", "scores")}
    config = {"kmin": args.kmin, "kmax": args.kmax, "k_fixed": args.k_fixed, "verify_fista": args.verify_fista}
    _write_manifest(args, argv, arts, config, args.seed, t0, out / "run.json")
    return EXIT_OK


def cmd_evaluate(args, argv, t0):
    from .io import align_labels, read_labels
    from .pipeline import ami, ari

    pid, pred = read_labels(args.pred)
    tid, truth = read_labels(args.truth_in)
    a, b = align_labels(pid, pred, tid, truth)
    print(json.dumps({"ami": ami(a, b), "ari": ari(a, b)}, separators=(",", ":")))
    return EXIT_OK


def cmd_replay(args, argv, t0):
    with open(args.run_manifest, encoding="utf-8") as fh:
        run = json.load(fh)
    old = list(run.get("argv", []))
    sub = run.get("subcommand")
    if sub not in OUTPUTS or not old:
        raise InvalidConfig(f"{args.run_manifest}: not a replayable run manifest")
    target = Path(args.out)
    target.mkdir(parents=True, exist_ok=True)
    new = list(old)
    for i, tok in enumerate(old[:-1]):
        is_dir = OUTPUTS[sub].get(tok)
        if is_dir is None or old.index(sub) > i:
            continue
        new[i + 1] = str(target) if is_dir else str(target / Path(old[i + 1]).name)
    logger.info("replaying: %s", " ".join(new))
    return main(new)


COMMANDS = {"simulate": cmd_simulate, "smooth": cmd_smooth, "distances": cmd_distances, "fit": cmd_fit,
            "cluster": cmd_cluster, "evaluate": cmd_evaluate, "replay": cmd_replay}


def _configure_logging(verbosity):
    level = logging.WARNING - 10 * min(verbosity, 2)
    root = logging.getLogger("faeclust")
    if not any(getattr(h, "_faeclust", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._faeclust = True
        root.addHandler(handler)
    root.setLevel(level)
    logging.captureWarnings(True)


def main(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _configure_logging(args.verbose)
    try:
        _set_threads(args.threads)
        return COMMANDS[args.command](args, _absolute_argv(argv), t0)
    except UsageError as exc:
        sys.stderr.write(f"faeclust: error: {exc}\n")
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        sys.stderr.write(f"faeclust: data error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        sys.stderr.write(f"faeclust: numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except FaeClustError as exc:
        sys.stderr.write(f"faeclust: error: {exc}\n")
        return EXIT_NUMERIC
    except (ValueError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"faeclust: error: {exc}\n")
        return EXIT_DATA if isinstance(exc, ValueError) else EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
