"""JSON-backed configuration objects with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import InvalidConfig

ACTIVATIONS = ("tanh", "elu", "sigmoid")


def _build(cls, data, what):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{what}: expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(f"{what}: unknown key(s) {unknown}")
    try:
        obj = cls(**data)
    except TypeError as exc:
        raise InvalidConfig(f"{what}: {exc}") from None
    obj.validate()
    return obj


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: invalid JSON ({exc})") from None


@dataclass
class NetConfig:
    """Functional autoencoder hyperparameters.

    ``layer_widths`` is ``[q1, mlp..., q~1, r1, r2]``: the encoder's
    functional layer width, the scalar MLP widths (bottleneck in the middle),
    the width fed to the decoder, and the two hidden functional decoder layer
    widths.  The bottleneck width must equal ``latent_dim``.
    """

    layer_widths: list = field(default_factory=lambda: [16, 16, 8, 16, 16, 16, 16])
    latent_dim: int = 8
    activation: str = "tanh"
    net_basis_size: int = 10
    tau: float = 0.9
    lambda_w: float = 1e-3
    lambda_c: float = 1e-2
    alpha: float = 0.2
    beta: float = 0.9
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    batch_norm: bool = True

    @property
    def mlp_widths(self):
        return list(self.layer_widths[:-2])

    @property
    def bottleneck_index(self):
        # index of the bottleneck among the MLP layers (layer k maps widths[k] -> widths[k+1])
        inner = self.layer_widths[1:-3]
        return len(inner) // 2

    def validate(self):
        w = self.layer_widths
        if not isinstance(w, (list, tuple)) or len(w) < 5 or any(int(x) != x or x < 1 for x in w):
            raise InvalidConfig("layer_widths must list at least 5 positive integers")
        self.layer_widths = [int(x) for x in w]
        inner = self.layer_widths[1:-3]
        if inner[len(inner) // 2] != self.latent_dim:
            raise InvalidConfig(f"bottleneck width {inner[len(inner) // 2]} != latent_dim {self.latent_dim}")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"activation must be one of {ACTIVATIONS}")
        if self.net_basis_size < 4:
            raise InvalidConfig("net_basis_size must be >= 4 (cubic B-splines)")
        if not 0.0 < self.tau <= 1.0:
            raise InvalidConfig("tau must lie in (0, 1]")
        if self.lambda_w < 0 or self.lambda_c < 0:
            raise InvalidConfig("loss weights must be nonnegative")
        if self.alpha <= 0 or not 0.0 <= self.beta < 1.0:
            raise InvalidConfig("need alpha > 0 and 0 <= beta < 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch_size >= 1 and epochs >= 0 required")
        return self

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "network config")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class FitConfig:
    """Settings of the alternating train/cluster loop."""

    pretrain_epochs: int = 50
    finetune_epochs: int = 10
    cluster_refresh_period: int = 1
    max_loops: int = 20
    tol: float = 0.01
    metric: str = "hilbert_l2"
    grid_size: int = 64
    dtw_radius: int = 4
    elastic_refine: bool = False
    neighbors: object = 10
    raw_exp: bool = False
    kmin: int = 2
    kmax: int = 10
    k_fixed: Optional[int] = None
    seed: int = 0

    def validate(self):
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.cluster_refresh_period < 1:
            raise InvalidConfig("cluster_refresh_period must be >= 1")
        if self.max_loops < 1:
            raise InvalidConfig("max_loops must be >= 1")
        if not 0.0 <= self.tol <= 1.0:
            raise InvalidConfig("tol must lie in [0, 1]")
        from .metrics import metric_kind
        try:
            self.metric = metric_kind(self.metric)
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from None
        if self.grid_size < 16:
            raise InvalidConfig("grid_size must be >= 16")
        if self.dtw_radius < 1:
            raise InvalidConfig("dtw_radius must be >= 1")
        if not (self.neighbors in ("knee", "connectivity") or (isinstance(self.neighbors, int) and self.neighbors >= 1)):
            raise InvalidConfig("neighbors must be 'knee', 'connectivity' or a positive integer")
        if not 2 <= self.kmin <= self.kmax:
            raise InvalidConfig("need 2 <= kmin <= kmax")
        if self.k_fixed is not None and self.k_fixed < 1:
            raise InvalidConfig("k_fixed must be positive")
        return self

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "fit config")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class DataManifest:
    """Basis and preprocessing choices for a long-format dataset."""

    basis: dict = field(default_factory=lambda: {"kind": "bspline", "m": 20, "degree": 3, "domain": [0.0, 1.0]})
    lambda_s: float = 1e-4
    standardize: bool = False

    def validate(self):
        b = self.basis
        if not isinstance(b, dict):
            raise InvalidConfig("manifest basis must be an object")
        extra = sorted(set(b) - {"kind", "m", "degree", "domain"})
        if extra:
            raise InvalidConfig(f"manifest basis: unknown key(s) {extra}")
        if "kind" not in b or "m" not in b:
            raise InvalidConfig("manifest basis needs 'kind' and 'm'")
        b.setdefault("degree", 3)
        b.setdefault("domain", [0.0, 1.0])
        if len(b["domain"]) != 2:
            raise InvalidConfig("manifest basis domain must be [a, b]")
        if self.lambda_s < 0:
            raise InvalidConfig("lambda_s must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "dataset manifest")

    def to_dict(self):
        return dataclasses.asdict(self)

    def build_basis(self):
        from .fdata import build_basis
        b = self.basis
        return build_basis(b["kind"], int(b["m"]), int(b["degree"]), tuple(float(x) for x in b["domain"]))
