"""Alternating embed / cluster / fine-tune loop and external agreement scores."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_mutual_info_score, adjusted_rand_score

from .config import FitConfig, NetConfig
from .cvxclust import ClusterResult, cluster_embedding, objective
from .errors import LengthMismatch
from .fdata import FunctionalDataset
from .metrics import build_similarity_graph, pairwise_distances, select_neighborhood_size
from .network import FaeNetwork, LossWeights, forward, loss_terms, pretrain, train_epochs

logger = logging.getLogger(__name__)

STABLE_REFRESHES = 2


def _pair(labels_a, labels_b):
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if len(a) != len(b):
        raise LengthMismatch(f"label vectors have lengths {len(a)} and {len(b)}")
    return a, b


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information, max-entropy normalization."""
    a, b = _pair(labels_a, labels_b)
    return float(adjusted_mutual_info_score(a, b, average_method="max"))


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index by pair counting."""
    a, b = _pair(labels_a, labels_b)
    return float(adjusted_rand_score(a, b))


def label_change_fraction(old, new) -> float:
    """Fraction of samples whose label changes under the best one-to-one relabeling."""
    a, b = _pair(old, new)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    C = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(C, (ia, ib), 1)
    r, c = linear_sum_assignment(-C)
    return 1.0 - C[r, c].sum() / len(a)


@dataclass
class LoopRecord:
    loop: int
    L_r: float
    L_w: float
    L_c: float
    L_s: float
    K: int
    change: Optional[float]
    silhouette: Optional[float]


@dataclass
class FitReport:
    records: list = field(default_factory=list)
    labels: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None
    converged: bool = False
    neighbors: int = 0
    n_edges: int = 0
    pretrain_loss: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)

    @property
    def n_loops(self):
        return len(self.records)

    def to_dict(self, include_times=False):
        out = {
            "n_loops": self.n_loops,
            "converged": self.converged,
            "neighbors": self.neighbors,
            "n_edges": self.n_edges,
            "pretrain_loss": [float(v) for v in self.pretrain_loss],
            "records": [dataclasses.asdict(r) for r in self.records],
            "final_K": int(self.records[-1].K) if self.records else None,
        }
        if include_times:
            out["wall_times"] = dict(self.wall_times)
        return out


def similarity_graph(dataset: FunctionalDataset, fit_cfg: FitConfig):
    """Distance matrix and frozen similarity graph on the functional inputs."""
    D = pairwise_distances(dataset.samples, fit_cfg.metric, N=fit_cfg.grid_size,
                           radius=fit_cfg.dtw_radius, refine=fit_cfg.elastic_refine)
    m = fit_cfg.neighbors
    if isinstance(m, str):
        m = select_neighborhood_size(D, m)
    m = int(min(m, len(dataset) - 1))
    return D, build_similarity_graph(D, m, raw_exp=fit_cfg.raw_exp)


def _smoothness_loss(X, graph, result: ClusterResult, paths):
    # convex clustering objective at the selected lambda, summed over latent dimensions
    if result.lam is None or not np.isfinite(result.lam):
        return float("nan")
    return float(sum(objective(X[:, d], p.values_at(result.lam), graph, result.lam)
                     for d, p in enumerate(paths)))


def fit(dataset: FunctionalDataset, net_cfg: NetConfig, fit_cfg: FitConfig, initial_labels=None,
        graph=None):
    """Pretrain, then alternate cluster updates and clustering-regularized fine-tuning.

    ``FitConfig.seed`` seeds the network.  Returns ``(net, ClusterResult, FitReport)``;
    the reported partition is the one from the last executed loop.
    """
    fit_cfg.validate()
    times = {"graph": 0.0, "pretrain": 0.0, "cluster": 0.0, "finetune": 0.0}
    t0 = time.perf_counter()
    if graph is None:
        _, graph = similarity_graph(dataset, fit_cfg)
    times["graph"] = time.perf_counter() - t0

    cfg = dataclasses.replace(net_cfg, seed=fit_cfg.seed)
    net = FaeNetwork(cfg, dataset.basis, dataset.p)
    C = dataset.coeff_array()
    t0 = time.perf_counter()
    hist = pretrain(net, C, fit_cfg.pretrain_epochs)
    times["pretrain"] = time.perf_counter() - t0

    report = FitReport(neighbors=graph.m_nn, n_edges=graph.n_edges, pretrain_loss=hist)
    k_range = range(fit_cfg.kmin, fit_cfg.kmax + 1)
    labels = None if initial_labels is None else np.asarray(initial_labels, dtype=np.int64)
    if labels is not None and len(labels) != len(dataset):
        raise LengthMismatch(f"initial labels have length {len(labels)}, dataset has {len(dataset)}")
    result = None
    X = None
    stable = 0
    weights = LossWeights(cfg.lambda_w, cfg.lambda_c)
    for loop in range(fit_cfg.max_loops):
        refresh = loop % fit_cfg.cluster_refresh_period == 0
        if refresh:
            t0 = time.perf_counter()
            X_new, _, _, cache = forward(net, C, mode="eval")
            res, _, paths = cluster_embedding(X_new, graph, k_range, fit_cfg.k_fixed)
            change = None if labels is None else label_change_fraction(labels, res.labels)
            terms = loss_terms(net, cache, res.labels)
            sil = res.scores.get(res.K, (None,))[0]
            report.records.append(LoopRecord(loop, terms["L_r"], terms["L_w"], terms["L_c"],
                                             _smoothness_loss(X_new, graph, res, paths), res.K, change, sil))
            logger.info("loop %d: K=%d change=%s L_r=%.4g", loop, res.K, change, terms["L_r"])
            labels, result, X = res.labels, res, X_new
            times["cluster"] += time.perf_counter() - t0
            stable = stable + 1 if change is not None and change < fit_cfg.tol else 0
            if stable >= STABLE_REFRESHES:
                report.converged = True
                break
        if loop == fit_cfg.max_loops - 1 or fit_cfg.finetune_epochs == 0:
            continue
        t0 = time.perf_counter()
        train_epochs(net, C, fit_cfg.finetune_epochs, weights, labels)
        times["finetune"] += time.perf_counter() - t0
    if not report.converged:
        logger.warning("label stability not reached within %d loops", fit_cfg.max_loops)
    report.labels = labels
    report.embedding = X
    report.wall_times = times
    return net, result, report
