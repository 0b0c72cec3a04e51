"""Functional autoencoder with hand-derived backpropagation.

Architecture (widths ``[q1, mlp..., q~1, r1, r2]``)::

    y --(functional weights W1, scalar bias b)--> x1 = a(int W1 y + b)
      --(FC -> BN -> act -> dropout)*--> x (bottleneck, no dropout) --> ... --> xh1
      --(functional weights w1, bias b1(t))--> yh1(t) = a(w1(t) xh1 + b1(t))
      --(w2, b2(t))--> yh2(t) = a(w2(t) yh1(t) + b2(t))
      --(w3)--> yh(t) = w3(t) yh2(t)

Functional weights and biases are expanded in a cubic B-spline "network
basis" of size ``l``.  The encoder integral against the data becomes a
contraction with the cross-Gram matrix between network and data bases; the
decoder is evaluated pointwise on the data basis' quadrature grid, where the
reconstruction loss is integrated.

Parameters live in a flat dict (names below) so gradients, momentum state and
checkpoints share one layout:

=============  ===================  ===========================================
name           shape                meaning
=============  ===================  ===========================================
enc_W          (q1, p, l)           encoder functional weights
enc_b          (q1,)                encoder scalar bias
mlp{k}_W       (in, out)            fully connected weights of MLP layer k
mlp{k}_b       (out,)               fully connected bias
mlp{k}_gamma   (out,)               batch-norm scale
mlp{k}_beta    (out,)               batch-norm shift
dec1_W         (r1, q~1, l)         first decoder functional weights
dec1_b         (r1, l)              first decoder bias function
dec2_W         (r2, r1, l)          second decoder functional weights
dec2_b         (r2, l)              second decoder bias function
dec3_W         (p, r2, l)           output functional weights (no bias)
=============  ===================  ===========================================
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import NetConfig
from .errors import (
    DivergenceDetected,
    InvalidConfig,
    NonFiniteActivation,
    ShapeMismatch,
    StaleCache,
)
from .fdata import BasisSystem, FunctionalDataset, build_basis, cross_gram, gauss_legendre_panels

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
BN_MIN_BATCH = 8
CHECKPOINT_VERSION = 1
NET_QUAD_NODES = 4

DECODER_KEYS = ("dec1_W", "dec1_b", "dec2_W", "dec2_b", "dec3_W")


# -- activations ---------------------------------------------------------------


def _tanh(z):
    return np.tanh(z)


def _dtanh(z, a):
    return 1.0 - a * a


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _dsigmoid(z, a):
    return a * (1.0 - a)


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _delu(z, a):
    return np.where(z > 0, 1.0, a + 1.0)


_ACT = {"tanh": (_tanh, _dtanh), "sigmoid": (_sigmoid, _dsigmoid), "elu": (_elu, _delu)}


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivation(f"non-finite values in {where}; try a smaller learning rate")


# -- containers ----------------------------------------------------------------


@dataclass
class LossWeights:
    lambda_w: float = 0.0
    lambda_c: float = 0.0

    def __post_init__(self):
        if self.lambda_w < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ForwardCache:
    """Intermediate quantities of one forward pass (consumed by :func:`backward`)."""

    version: int
    mode: str
    bn_mode: str
    Z: np.ndarray
    pre0: np.ndarray
    h0: np.ndarray
    layers: list
    X: np.ndarray
    xh1: np.ndarray
    dec: dict
    Y: np.ndarray
    Yhat: np.ndarray

    @property
    def n(self):
        return self.Z.shape[0]


class FaeNetwork:
    """Parameters, fixed basis matrices and normalization state of the autoencoder.

    Parameters
    ----------
    config : NetConfig
    data_basis : BasisSystem
        Basis of the functional inputs; its quadrature grid is where
        reconstructions are evaluated.
    p : int
        Number of functional dimensions.
    """

    def __init__(self, config: NetConfig, data_basis: BasisSystem, p: int,
                 params: Optional[dict] = None, running: Optional[dict] = None):
        config.validate()
        self.config = config
        self.data_basis = data_basis
        self.p = int(p)
        self.net_basis = build_basis("bspline", config.net_basis_size, 3, data_basis.domain)
        self.gram = self.net_basis.gram
        self.cross = cross_gram(self.net_basis, data_basis)        # (l, m_data)
        self.quad_nodes, self.quad_w = _network_quadrature(data_basis, self.net_basis)
        self.Bq = self.net_basis.evaluate(self.quad_nodes)         # (T, l)
        self.Dq = data_basis.evaluate(self.quad_nodes)             # (T, m_data)
        self._proj = np.linalg.pinv(self.Dq)                       # grid -> data coefficients
        act, dact = _ACT[config.activation]
        self.act, self.dact = act, dact
        self.bn_enabled = bool(config.batch_norm) and config.batch_size >= BN_MIN_BATCH
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self._init_rng = np.random.default_rng(seeds[0])
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.dropout_rng = np.random.default_rng(seeds[2])
        self.params = params if params is not None else self._init_params()
        self.running = running if running is not None else self._init_running()
        self.opt_state = None
        self.version = 0
        self._check_shapes()

    # geometry
    @property
    def widths(self):
        return self.config.layer_widths

    @property
    def n_mlp(self):
        return len(self.widths) - 3

    @property
    def bottleneck(self):
        return self.config.bottleneck_index

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def _init_params(self):
        rng = self._init_rng
        w = self.widths
        ell = self.config.net_basis_size
        q1, qt, r1, r2 = w[0], w[-3], w[-2], w[-1]
        P = {}
        enc = rng.normal(0.0, 1.0 / math.sqrt(ell * self.p), size=(q1, self.p, ell))
        norms = np.sqrt(np.einsum("qdu,uv,qdv->qd", enc, self.gram, enc))
        P["enc_W"] = enc / norms[:, :, None]
        P["enc_b"] = np.zeros(q1)
        for k in range(self.n_mlp):
            fi, fo = w[k], w[k + 1]
            lim = math.sqrt(6.0 / (fi + fo))
            P[f"mlp{k}_W"] = rng.uniform(-lim, lim, size=(fi, fo))
            P[f"mlp{k}_b"] = np.zeros(fo)
            P[f"mlp{k}_gamma"] = np.ones(fo)
            P[f"mlp{k}_beta"] = np.zeros(fo)
        P["dec1_W"] = rng.normal(0.0, 1.0 / math.sqrt(ell * qt), size=(r1, qt, ell))
        P["dec1_b"] = np.zeros((r1, ell))
        P["dec2_W"] = rng.normal(0.0, 1.0 / math.sqrt(ell * r1), size=(r2, r1, ell))
        P["dec2_b"] = np.zeros((r2, ell))
        P["dec3_W"] = rng.normal(0.0, 1.0 / math.sqrt(ell * r2), size=(self.p, r2, ell))
        return P

    def _init_running(self):
        R = {}
        for k in range(self.n_mlp):
            fo = self.widths[k + 1]
            R[f"mlp{k}_mean"] = np.zeros(fo)
            R[f"mlp{k}_var"] = np.ones(fo)
        return R

    def _check_shapes(self):
        ref = FaeNetwork._shapes(self)
        for name, shape in ref.items():
            if name not in self.params:
                raise ShapeMismatch(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(ref)
        if extra:
            raise ShapeMismatch(f"unexpected parameters {sorted(extra)}")

    def _shapes(self):
        w = self.widths
        ell = self.config.net_basis_size
        out = {"enc_W": (w[0], self.p, ell), "enc_b": (w[0],)}
        for k in range(self.n_mlp):
            out[f"mlp{k}_W"] = (w[k], w[k + 1])
            for s in ("b", "gamma", "beta"):
                out[f"mlp{k}_{s}"] = (w[k + 1],)
        out.update({"dec1_W": (w[-2], w[-3], ell), "dec1_b": (w[-2], ell),
                    "dec2_W": (w[-1], w[-2], ell), "dec2_b": (w[-1], ell),
                    "dec3_W": (self.p, w[-1], ell)})
        return out

    def set_params(self, params):
        self.params = params
        self.version += 1

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def grid_values(self, coeffs):
        """Data coefficients ``(n, p, m)`` evaluated on the quadrature grid."""
        return coeffs @ self.Dq.T

    def embed(self, data):
        """Eval-mode latent representation of ``data``."""
        X, *_ = forward(self, data, mode="eval")
        return X


def _network_quadrature(data_basis, net_basis):
    # Gauss-Legendre panels on the union of both bases' breakpoints; a few
    # nodes per panel are enough since the decoder output is not polynomial anyway
    breaks = np.unique(np.concatenate([data_basis.knots, net_basis.knots]))
    a, b = data_basis.domain
    breaks = breaks[(breaks >= a) & (breaks <= b)]
    if data_basis.kind == "fourier":
        breaks = np.union1d(breaks, np.linspace(a, b, max(9, data_basis.m + 2)))
    return gauss_legendre_panels(breaks, NET_QUAD_NODES)


def _as_coeffs(net, data):
    if isinstance(data, FunctionalDataset):
        if not data.basis.same_as(net.data_basis):
            raise ShapeMismatch("dataset basis differs from the network's data basis")
        data = data.coeff_array()
    C = np.asarray(data, dtype=float)
    if C.ndim != 3 or C.shape[1] != net.p or C.shape[2] != net.data_basis.m:
        raise ShapeMismatch(f"expected coefficients (n, {net.p}, {net.data_basis.m}), got {C.shape}")
    if C.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    return C


# -- forward -------------------------------------------------------------------


# products batched over the trailing grid axis; einsum would not use BLAS here


def _apply(x, W):
    """``out[n, r, t] = sum_q x[n, q, t] W[r, q, t]``."""
    return np.matmul(x.transpose(2, 0, 1), W.transpose(2, 1, 0)).transpose(1, 2, 0)


def _apply_t(x, W):
    """``out[n, q, t] = sum_r x[n, r, t] W[r, q, t]``."""
    return np.matmul(x.transpose(2, 0, 1), W.transpose(2, 0, 1)).transpose(1, 2, 0)


def _outer(a, b):
    """``out[r, q, t] = sum_n a[n, r, t] b[n, q, t]``."""
    return np.matmul(a.transpose(2, 1, 0), b.transpose(2, 0, 1)).transpose(1, 2, 0)


def _decode(net, xh1):
    P = net.params
    Bt = net.Bq.T
    A1 = np.einsum("rqu,nq->nru", P["dec1_W"], xh1) + P["dec1_b"][None]
    P1 = A1 @ Bt                                            # (n, r1, T)
    Y1 = net.act(P1)
    _check_finite(Y1, "decoder layer 1")
    W2t = P["dec2_W"] @ Bt                                  # (r2, r1, T)
    P2 = _apply(Y1, W2t) + (P["dec2_b"] @ Bt)[None]
    Y2 = net.act(P2)
    _check_finite(Y2, "decoder layer 2")
    W3t = P["dec3_W"] @ Bt                                  # (p, r2, T)
    Yhat = _apply(Y2, W3t)
    _check_finite(Yhat, "decoder output")
    return {"P1": P1, "Y1": Y1, "W2t": W2t, "P2": P2, "Y2": Y2, "W3t": W3t}, Yhat


def forward(net: FaeNetwork, data, mode: str = "train", bn_stats: Optional[str] = None,
            update_running: bool = True):
    """Run the autoencoder on a batch.

    Parameters
    ----------
    data : FunctionalDataset or ndarray, shape (n, p, m)
    mode : {"train", "eval"}
        Train mode samples dropout masks and (with batch norm on) normalizes
        by batch moments; eval mode uses running moments and no dropout.
    bn_stats : {"batch", "running"}, optional
        Override the batch-norm statistics source.

    Returns
    -------
    X : ndarray (n, s)
        Latent representation (bottleneck activations).
    recon : ndarray (n, p, T)
        Reconstructions on the data quadrature grid.
    recon_coeffs : ndarray (n, p, m)
        Reconstructions projected on the data basis.
    cache : ForwardCache
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    C = _as_coeffs(net, data)
    n = C.shape[0]
    P = net.params
    cfg = net.config
    if not net.bn_enabled:
        bn_mode = "off"
    elif bn_stats is not None:
        bn_mode = bn_stats
    else:
        bn_mode = "batch" if (mode == "train" and n > 1) else "running"

    Z = C @ net.cross.T                                     # (n, p, l)
    pre0 = np.einsum("qdl,ndl->nq", P["enc_W"], Z) + P["enc_b"]
    h0 = net.act(pre0)
    _check_finite(h0, "encoder layer")

    layers = []
    h = h0
    X = None
    for k in range(net.n_mlp):
        z = h @ P[f"mlp{k}_W"] + P[f"mlp{k}_b"]
        rec = {"inp": h, "z": z}
        if bn_mode == "off":
            u = z
        else:
            if bn_mode == "batch":
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if mode == "train" and update_running:
                    net.running[f"mlp{k}_mean"] = BN_MOMENTUM * net.running[f"mlp{k}_mean"] + (1 - BN_MOMENTUM) * mu
                    net.running[f"mlp{k}_var"] = BN_MOMENTUM * net.running[f"mlp{k}_var"] + (1 - BN_MOMENTUM) * var
            else:
                mu = net.running[f"mlp{k}_mean"]
                var = net.running[f"mlp{k}_var"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv
            u = P[f"mlp{k}_gamma"] * xhat + P[f"mlp{k}_beta"]
            rec.update(xhat=xhat, inv=inv)
        a = net.act(u)
        _check_finite(a, f"MLP layer {k}")
        rec.update(u=u, a=a)
        if mode == "train" and cfg.tau < 1.0 and k != net.bottleneck:
            mask = (net.dropout_rng.random(a.shape) < cfg.tau) / cfg.tau
            rec["mask"] = mask
            a = a * mask
        if k == net.bottleneck:
            X = a
        layers.append(rec)
        h = a
    xh1 = h
    dec, Yhat = _decode(net, xh1)
    Y = net.grid_values(C)
    recon_coeffs = Yhat @ net._proj.T
    cache = ForwardCache(net.version, mode, bn_mode, Z, pre0, h0, layers, X, xh1, dec, Y, Yhat)
    return X, Yhat, recon_coeffs, cache


# -- losses --------------------------------------------------------------------


def reconstruction_loss(Y, Yhat, quad_weights):
    """``(1/n) sum_i sum_d ||y_i^d - yhat_i^d||^2`` by quadrature on the grid."""
    Y = np.asarray(Y, dtype=float)
    Yhat = np.asarray(Yhat, dtype=float)
    if Y.shape != Yhat.shape:
        raise ShapeMismatch(f"shapes {Y.shape} and {Yhat.shape} differ")
    R = Y - Yhat
    return float(np.sum(R * R * quad_weights) / Y.shape[0])


def orthogonality_penalty(enc_W, gram):
    """Sum over dimensions of squared off-diagonal inner products plus ``(||w||^2 - 1)^2``."""
    M = np.einsum("qdu,uv,gdv->dqg", enc_W, gram, enc_W)
    off = M.copy()
    idx = np.arange(M.shape[1])
    off[:, idx, idx] = 0.0
    diag = M[:, idx, idx]
    return float(0.5 * np.sum(off * off) + np.sum((diag - 1.0) ** 2))


def orthogonality_grad(enc_W, gram):
    M = np.einsum("qdu,uv,gdv->dqg", enc_W, gram, enc_W)
    idx = np.arange(M.shape[1])
    S = M.copy()
    S[:, idx, idx] = 2.0 * (M[:, idx, idx] - 1.0)
    # d/dW of <S, W G W^T> per dimension = 2 S W G
    return 2.0 * np.einsum("dqg,gdu,uv->qdv", S, enc_W, gram)


def roughness_penalty(params):
    """l1 norm of all decoder functional weight and bias coefficients."""
    return float(sum(np.abs(params[k]).sum() for k in DECODER_KEYS))


def roughness_grad(params):
    return {k: np.sign(params[k]) for k in DECODER_KEYS}


def roughness_diagnostic(params, basis: BasisSystem):
    """``sum int (w'')^2`` over decoder functional weights and biases (not optimized)."""
    total = 0.0
    for k in DECODER_KEYS:
        c = params[k].reshape(-1, params[k].shape[-1])
        total += float(np.einsum("iu,uv,iv->", c, basis.penalty, c))
    return total


def _cluster_parts(X, labels):
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if len(labels) != X.shape[0]:
        raise ShapeMismatch("partition does not cover every row of X")
    _, inv = np.unique(labels, return_inverse=True)
    K = inv.max() + 1
    counts = np.bincount(inv, minlength=K).astype(float)
    mu = np.zeros((K, X.shape[1]))
    np.add.at(mu, inv, X)
    mu /= counts[:, None]
    return X, inv, mu


def clustering_loss(X, labels):
    """``(1/(n s)) (2 WSS - TSS)`` for the partition given by ``labels``."""
    X, inv, mu = _cluster_parts(X, labels)
    n, s = X.shape
    wss = np.sum((X - mu[inv]) ** 2)
    tss = np.sum((X - X.mean(axis=0)) ** 2)
    return float((2.0 * wss - tss) / (n * s))


def clustering_grad(X, labels):
    """Gradient of :func:`clustering_loss` in X, cluster means re-expanded."""
    X, inv, mu = _cluster_parts(X, labels)
    n, s = X.shape
    return (4.0 * (X - mu[inv]) - 2.0 * (X - X.mean(axis=0))) / (n * s)


def loss_terms(net, cache: ForwardCache, labels=None):
    """Dictionary with ``L_r``, ``L_orth``, ``L_rough``, ``L_w`` and ``L_c``."""
    Lr = reconstruction_loss(cache.Y, cache.Yhat, net.quad_w)
    Lo = orthogonality_penalty(net.params["enc_W"], net.gram)
    Lro = roughness_penalty(net.params)
    Lc = clustering_loss(cache.X, labels) if labels is not None else 0.0
    return {"L_r": Lr, "L_orth": Lo, "L_rough": Lro, "L_w": Lo + Lro, "L_c": Lc}


def total_loss(net, cache, labels, weights: LossWeights):
    t = loss_terms(net, cache, labels)
    return t["L_r"] + weights.lambda_w * t["L_w"] + weights.lambda_c * t["L_c"]


# -- backward ------------------------------------------------------------------


def _decode_backward(net, xh1, dec, dYhat):
    P = net.params
    Bq = net.Bq
    g = {}
    gW3t = _outer(dYhat, dec["Y2"])
    g["dec3_W"] = gW3t @ Bq
    dY2 = _apply_t(dYhat, dec["W3t"])
    dP2 = dY2 * net.dact(dec["P2"], dec["Y2"])
    g["dec2_W"] = _outer(dP2, dec["Y1"]) @ Bq
    g["dec2_b"] = dP2.sum(axis=0) @ Bq
    dY1 = _apply_t(dP2, dec["W2t"])
    dP1 = dY1 * net.dact(dec["P1"], dec["Y1"])
    dA1 = dP1 @ Bq                                          # (n, r1, l)
    g["dec1_W"] = np.einsum("nru,nq->rqu", dA1, xh1)
    g["dec1_b"] = dA1.sum(axis=0)
    dxh1 = np.einsum("rqu,nru->nq", P["dec1_W"], dA1)
    return g, dxh1


def backward(net: FaeNetwork, cache: ForwardCache, labels=None,
             weights: LossWeights = LossWeights()):
    """Analytic gradient of ``L_r + lambda_w (L_orth + L_rough) + lambda_c L_c``.

    ``labels`` (the fixed partition of the batch rows) is only needed when
    ``weights.lambda_c > 0``.  Cluster means are functions of X; assignments
    are held fixed.  Raises :class:`StaleCache` if parameters changed since the
    forward pass.
    """
    if cache.version != net.version:
        raise StaleCache(f"cache from parameter version {cache.version}, network is at {net.version}")
    P = net.params
    n = cache.n
    g = {}
    dYhat = (-2.0 / n) * (cache.Y - cache.Yhat) * net.quad_w
    gd, dh = _decode_backward(net, cache.xh1, cache.dec, dYhat)
    g.update(gd)

    dX = None
    if weights.lambda_c > 0:
        if labels is None:
            raise ValueError("lambda_c > 0 needs a partition")
        dX = weights.lambda_c * clustering_grad(cache.X, labels)

    for k in reversed(range(net.n_mlp)):
        rec = cache.layers[k]
        if "mask" in rec:
            dh = dh * rec["mask"]
        if k == net.bottleneck and dX is not None:
            dh = dh + dX
        du = dh * net.dact(rec["u"], rec["a"])
        if cache.bn_mode == "off":
            dz = du
            g[f"mlp{k}_gamma"] = np.zeros_like(P[f"mlp{k}_gamma"])
            g[f"mlp{k}_beta"] = np.zeros_like(P[f"mlp{k}_beta"])
        else:
            xhat, inv = rec["xhat"], rec["inv"]
            g[f"mlp{k}_gamma"] = np.sum(du * xhat, axis=0)
            g[f"mlp{k}_beta"] = du.sum(axis=0)
            dxhat = du * P[f"mlp{k}_gamma"]
            if cache.bn_mode == "batch":
                m = dxhat.shape[0]
                dz = (inv / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            else:
                dz = dxhat * inv
        g[f"mlp{k}_W"] = rec["inp"].T @ dz
        g[f"mlp{k}_b"] = dz.sum(axis=0)
        dh = dz @ P[f"mlp{k}_W"].T

    dpre0 = dh * net.dact(cache.pre0, cache.h0)
    g["enc_W"] = np.einsum("nq,ndl->qdl", dpre0, cache.Z)
    g["enc_b"] = dpre0.sum(axis=0)

    if weights.lambda_w > 0:
        g["enc_W"] = g["enc_W"] + weights.lambda_w * orthogonality_grad(P["enc_W"], net.gram)
        for key, val in roughness_grad(P).items():
            g[key] = g[key] + weights.lambda_w * val
    return g


# -- optimization --------------------------------------------------------------


def sgd_momentum_step(params, grads, state, alpha, beta):
    """One momentum step: ``m <- beta m + (1 - beta) g``, ``theta <- theta - alpha m``.

    ``state`` may be ``None`` (momentum starts at zero).  Returns new
    ``(params, state)`` dicts; inputs are not modified.
    """
    if alpha <= 0 or not 0.0 <= beta < 1.0:
        raise ValueError("need alpha > 0 and 0 <= beta < 1")
    if state is None:
        state = {k: np.zeros_like(v) for k, v in params.items()}
    new_state = {}
    new_params = {}
    for k, theta in params.items():
        gk = grads.get(k)
        m = state[k] if gk is None else beta * state[k] + (1.0 - beta) * gk
        new_state[k] = m
        new_params[k] = theta - alpha * m
    return new_params, new_state


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    nb = max(1, math.ceil(n / max(1, batch_size)))
    return np.array_split(perm, nb)


def train_epochs(net: FaeNetwork, data, epochs: int, weights: LossWeights, labels=None,
                 alpha=None, beta=None, divergence_factor=1e3):
    """Mini-batch momentum SGD over ``epochs`` shuffled passes.

    Returns the per-epoch mean total loss.  Raises :class:`DivergenceDetected`
    when an epoch's loss exceeds ``divergence_factor`` times the initial loss.
    """
    C = _as_coeffs(net, data)
    n = C.shape[0]
    alpha = net.config.alpha if alpha is None else alpha
    beta = net.config.beta if beta is None else beta
    if labels is not None:
        labels = np.asarray(labels)
    history = []
    if epochs <= 0:
        return history
    _, _, _, c0 = forward(net, C, mode="eval")
    init = total_loss(net, c0, labels, weights)
    for ep in range(epochs):
        tot = 0.0
        for idx in _batches(n, net.config.batch_size, net.shuffle_rng):
            lab = labels[idx] if labels is not None else None
            _, _, _, cache = forward(net, C[idx], mode="train")
            tot += total_loss(net, cache, lab, weights) * len(idx)
            grads = backward(net, cache, lab, weights)
            params, net.opt_state = sgd_momentum_step(net.params, grads, net.opt_state, alpha, beta)
            net.set_params(params)
        loss = tot / n
        history.append(loss)
        if not math.isfinite(loss) or loss > divergence_factor * max(init, 1e-300):
            raise DivergenceDetected(f"epoch {ep}: loss {loss:.4g} exceeds {divergence_factor:g} x initial {init:.4g}")
    return history


def pretrain(net: FaeNetwork, data, epochs: Optional[int] = None):
    """Minimize the penalized reconstruction loss only (no clustering term)."""
    epochs = net.config.epochs if epochs is None else epochs
    w = LossWeights(net.config.lambda_w, 0.0)
    hist = train_epochs(net, data, epochs, w)
    if hist:
        logger.info("pretrain: %d epochs, loss %.4g -> %.4g", epochs, hist[0], hist[-1])
    return hist


def fit_decoder(net: FaeNetwork, x, coeffs, epochs=2000, alpha=None, beta=None, lambda_w=0.0,
                batch_size=None, seed=0):
    """Train only the functional decoder on pairs ``(x_i, y_i)``.

    ``x`` has shape ``(n, q~1)`` and feeds the first decoder layer directly;
    ``coeffs`` are data-basis coefficients ``(n, p, m)``.  Returns per-epoch
    mean reconstruction loss.
    """
    x = np.asarray(x, dtype=float)
    C = _as_coeffs(net, coeffs)
    if x.shape != (C.shape[0], net.widths[-3]):
        raise ShapeMismatch(f"decoder inputs must have shape ({C.shape[0]}, {net.widths[-3]})")
    alpha = net.config.alpha if alpha is None else alpha
    beta = net.config.beta if beta is None else beta
    bs = net.config.batch_size if batch_size is None else batch_size
    rng = np.random.default_rng(seed)
    Y = net.grid_values(C)
    state = None
    history = []
    for _ in range(epochs):
        tot = 0.0
        for idx in _batches(len(x), bs, rng):
            dec, Yhat = _decode(net, x[idx])
            R = Y[idx] - Yhat
            tot += float(np.sum(R * R * net.quad_w))
            g, _ = _decode_backward(net, x[idx], dec, (-2.0 / len(idx)) * R * net.quad_w)
            if lambda_w > 0:
                for k, v in roughness_grad(net.params).items():
                    g[k] = g[k] + lambda_w * v
            sub = {k: net.params[k] for k in DECODER_KEYS}
            sub, state = sgd_momentum_step(sub, g, state, alpha, beta)
            params = dict(net.params)
            params.update(sub)
            net.set_params(params)
        history.append(tot / len(x))
    return history


def decode(net: FaeNetwork, xh1):
    """Decoder output on the network quadrature grid, shape ``(n, p, T)``."""
    return _decode(net, np.asarray(xh1, dtype=float))[1]


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(net: FaeNetwork, path):
    meta = {
        "format": "faeclust-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "p": net.p,
        "data_basis": {"kind": net.data_basis.kind, "m": net.data_basis.m,
                       "degree": net.data_basis.degree, "domain": list(net.data_basis.domain)},
        "bn_enabled": net.bn_enabled,
    }
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"running/{k}": v for k, v in net.running.items()})
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> FaeNetwork:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "faeclust-checkpoint":
            raise InvalidConfig(f"{path} is not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidConfig(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}
        running = {k[8:]: z[k].copy() for k in z.files if k.startswith("running/")}
    b = meta["data_basis"]
    basis = build_basis(b["kind"], b["m"], b["degree"], tuple(b["domain"]))
    net = FaeNetwork(NetConfig.from_dict(meta["config"]), basis, meta["p"], params, running)
    net.bn_enabled = meta["bn_enabled"]
    return net
