"""The DFEI network and the single shared-MLP baseline.

Parameter partition:
  shared  = embedding tables, shared tower, h1/h2/h3 projections
  domain d = tower d and prediction head d

The domain feature bank holds one EMA vector per domain. It is plain numpy
state outside the autograd graph, so no gradient can ever reach it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, StateError
from .numcore import autograd as ag
from .numcore.autograd import Tensor
from .numcore.nn import Linear, MLPSpec, derived_rng, embedding_uniform, mlp_forward

MODES = ("full", "no_dfi", "no_dfei", "mlp")


@dataclass
class ModelConfig:
    num_domains: int
    vocab_sizes: list[int]
    embed_dim: int = 16
    tower_dims: list[int] = field(default_factory=lambda: [128, 64, 32])
    dropout_rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3])
    attention_dim: int = 32
    alpha: float = 0.9
    head_dims: list[int] = field(default_factory=lambda: [64, 32])

    def __post_init__(self):
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]
        self.tower_dims = [int(v) for v in self.tower_dims]
        self.head_dims = [int(v) for v in self.head_dims]
        self.dropout_rates = [float(r) for r in self.dropout_rates]
        if self.num_domains < 1:
            raise ConfigError("num_domains must be positive")
        if not self.vocab_sizes or min(self.vocab_sizes) < 1:
            raise ConfigError("vocab_sizes must be a non-empty list of positive integers")
        if self.embed_dim < 1 or self.attention_dim < 1:
            raise ConfigError("embed_dim and attention_dim must be positive")
        if not self.tower_dims or len(self.tower_dims) != len(self.dropout_rates):
            raise ConfigError("tower_dims and dropout_rates must be non-empty and of equal length")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ConfigError("dropout rates must lie in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def num_fields(self) -> int:
        return len(self.vocab_sizes)

    @property
    def feature_dim(self) -> int:
        return self.tower_dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamGroup:
    name: str
    tensors: dict[str, Tensor]
    group: str  # "shared" or "domain:<d>"


@dataclass
class ForwardResult:
    prob: Tensor
    u: np.ndarray | None = None
    weights: np.ndarray | None = None


class DomainFeatureBank:
    """One moving-average vector per domain, updated from batch means."""

    def __init__(self, num_domains: int, dim: int, alpha: float):
        self.alpha = float(alpha)
        self.vectors = np.zeros((num_domains, dim))
        self.initialized = np.zeros(num_domains, dtype=bool)
        self.steps = np.zeros(num_domains, dtype=np.int64)

    @property
    def num_domains(self) -> int:
        return self.vectors.shape[0]

    def _index(self, d: int) -> int:
        if not 1 <= d <= self.num_domains:
            raise ValueError(f"unknown domain {d}; expected 1..{self.num_domains}")
        return d - 1

    def update(self, d: int, u: np.ndarray) -> np.ndarray:
        i = self._index(d)
        u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] == 0:
            raise ValueError("dfe update needs a non-empty [batch, dim] array")
        pooled = u.mean(axis=0)
        if self.initialized[i]:
            self.vectors[i] = self.alpha * self.vectors[i] + (1.0 - self.alpha) * pooled
        else:
            self.vectors[i] = pooled
            self.initialized[i] = True
        self.steps[i] += 1
        return self.vectors[i].copy()

    def vector(self, d: int) -> np.ndarray:
        i = self._index(d)
        if not self.initialized[i]:
            raise StateError(f"domain feature for domain {d} is not initialized")
        return self.vectors[i]

    def require_all(self) -> None:
        missing = [i + 1 for i in np.flatnonzero(~self.initialized)]
        if missing:
            raise StateError(f"domain feature for domain {missing[0]} is not initialized")

    def copy(self) -> "DomainFeatureBank":
        other = DomainFeatureBank(self.num_domains, self.vectors.shape[1], self.alpha)
        other.vectors = self.vectors.copy()
        other.initialized = self.initialized.copy()
        other.steps = self.steps.copy()
        return other


def dfe_update(bank: DomainFeatureBank, d: int, u) -> np.ndarray:
    return bank.update(d, u)


class _BaseModel:
    mode: str
    config: ModelConfig
    bank: DomainFeatureBank | None

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.rng = derived_rng(self.seed, "dropout")
        self.embedding = [
            Tensor(
                embedding_uniform(v + 1, config.embed_dim, derived_rng(self.seed, f"embedding.{f}")),
                requires_grad=True,
                name=f"embedding.{f}",
            )
            for f, v in enumerate(config.vocab_sizes)
        ]

    def __setattr__(self, key, value):
        if key == "mode" and "mode" in self.__dict__:
            raise StateError("the ablation mode is fixed at construction")
        super().__setattr__(key, value)

    # ------------------------------------------------------------ structure
    def param_groups(self) -> list[ParamGroup]:
        raise NotImplementedError

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for g in self.param_groups():
            out.update(g.tensors)
        return out

    def group_of(self) -> dict[str, str]:
        return {n: g.group for g in self.param_groups() for n in g.tensors}

    def update_sets(self, d: int) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """(shared, domain-specific) tensors touched by a step on domain ``d``."""
        self._check_domain(d)
        shared: dict[str, Tensor] = {}
        specific: dict[str, Tensor] = {}
        for g in self.param_groups():
            if g.group == "shared":
                shared.update(g.tensors)
            elif g.group == f"domain:{d}":
                specific.update(g.tensors)
        return shared, specific

    @property
    def shared_lr_divisor(self) -> int:
        """Shared parameters step with ``lr / divisor``; D for the multi-domain models."""
        return self.config.num_domains

    def _check_domain(self, d: int) -> None:
        if not isinstance(d, (int, np.integer)) or not 1 <= d <= self.config.num_domains:
            raise ValueError(f"unknown domain {d!r}; expected 1..{self.config.num_domains}")

    # -------------------------------------------------------------- forward
    def embed(self, features) -> Tensor:
        ids = np.asarray(getattr(features, "features", features))
        if ids.ndim != 2 or ids.shape[1] != self.config.num_fields:
            raise DataError(f"expected feature ids of shape [batch, {self.config.num_fields}], got {ids.shape}")
        parts = []
        for f, table in enumerate(self.embedding):
            col = ids[:, f]
            bad = np.flatnonzero((col < 0) | (col > self.config.vocab_sizes[f]))
            if bad.size:
                r = int(bad[0])
                raise DataError(f"feature id {int(col[r])} out of range for field {f} at row {r}")
            parts.append(ag.embedding_lookup(table, col))
        return parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)

    def forward(self, features, d: int, training: bool = False) -> ForwardResult:
        raise NotImplementedError

    def predict(self, features, d: int, training: bool = False, chunk: int = 4096) -> np.ndarray:
        ids = np.asarray(getattr(features, "features", features))
        out = [self.forward(ids[i:i + chunk], d, training).prob.data for i in range(0, len(ids), chunk)]
        return np.concatenate(out) if out else np.zeros(0)

    # ---------------------------------------------------------------- state
    def state_dict(self) -> dict:
        state = {"params": {n: t.data.copy() for n, t in self.params.items()}}
        if self.bank is not None:
            state["bank"] = self.bank.copy()
        state["rng"] = self.rng.bit_generator.state
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.params
        for name, arr in state["params"].items():
            params[name].data[...] = arr
        if self.bank is not None and "bank" in state:
            b = state["bank"]
            self.bank.vectors[...] = b.vectors
            self.bank.initialized[...] = b.initialized
            self.bank.steps[...] = b.steps
        if "rng" in state:
            self.rng.bit_generator.state = state["rng"]


class DfeiModel(_BaseModel):
    """Shared embedding, shared tower, per-domain towers and heads, DFE and DFI.

    ``mode`` selects the ablation variant:
      full    -- head sees [s, u, v_d, z]
      no_dfi  -- head sees [s, u, v_d]; the bank is still maintained
      no_dfei -- head sees [s, u]; no bank and no attention projections
    """

    def __init__(self, config: ModelConfig, seed: int = 0, mode: str = "full"):
        if mode not in ("full", "no_dfi", "no_dfei"):
            raise ConfigError(f"unknown DFEI mode {mode!r}")
        super().__init__(config, seed)
        self.mode = mode
        c = config
        in_dim = c.num_fields * c.embed_dim
        self.shared_tower = MLPSpec.create("shared_tower", in_dim, c.tower_dims, self.seed)
        # domain towers and heads start from one common draw; training alone separates them
        self.towers = [
            MLPSpec.create(f"tower.{d}", in_dim, c.tower_dims, self.seed, seed_name="tower")
            for d in range(1, c.num_domains + 1)
        ]
        fd = c.feature_dim
        self.bank = DomainFeatureBank(c.num_domains, fd, c.alpha) if mode != "no_dfei" else None
        if mode == "full":
            k = c.attention_dim
            self.h1 = Linear.create("h1", fd, k, self.seed)
            self.h2 = Linear.create("h2", in_dim, k, self.seed)
            self.h3 = Linear.create("h3", fd, k, self.seed)
        else:
            self.h1 = self.h2 = self.h3 = None
        head_in = self.head_input_dim
        self.heads = [
            (
                MLPSpec.create(f"head.{d}", head_in, c.head_dims, self.seed, seed_name="head"),
                Linear.create(f"head.{d}.out", c.head_dims[-1] if c.head_dims else head_in, 1, self.seed,
                              seed_name="head.out"),
            )
            for d in range(1, c.num_domains + 1)
        ]

    @property
    def head_input_dim(self) -> int:
        fd = self.config.feature_dim
        return {"full": 3 * fd + self.config.attention_dim, "no_dfi": 3 * fd, "no_dfei": 2 * fd}[self.mode]

    def param_groups(self) -> list[ParamGroup]:
        groups = [
            ParamGroup("embedding", {t.name: t for t in self.embedding}, "shared"),
            ParamGroup("shared_tower", self.shared_tower.tensors(), "shared"),
        ]
        if self.mode == "full":
            for h in (self.h1, self.h2, self.h3):
                groups.append(ParamGroup(h.name, h.tensors(), "shared"))
        for d in range(1, self.config.num_domains + 1):
            groups.append(ParamGroup(f"tower.{d}", self.towers[d - 1].tensors(), f"domain:{d}"))
            hidden, out = self.heads[d - 1]
            head = hidden.tensors()
            head.update(out.tensors())
            groups.append(ParamGroup(f"head.{d}", head, f"domain:{d}"))
        return groups

    def towers_forward(self, e: Tensor, d: int, training: bool = False) -> tuple[Tensor, Tensor]:
        self._check_domain(d)
        rates = self.config.dropout_rates
        s = mlp_forward(e, self.shared_tower, rates, training, self.rng)
        u = mlp_forward(e, self.towers[d - 1], rates, training, self.rng)
        return s, u

    def dfi_integrate(self, e: Tensor, bank: DomainFeatureBank | None = None) -> tuple[Tensor, Tensor]:
        """Per-sample attention over all domain features.

        query = h2(e) per row, keys = h3(v_j), values = h1(v_j) per domain;
        returns (z [B, k], weights [B, D]).
        """
        if self.mode != "full":
            raise StateError(f"feature integration is disabled in mode {self.mode!r}")
        bank = bank if bank is not None else self.bank
        bank.require_all()
        V = Tensor(bank.vectors)
        keys = self.h3(V)
        values = self.h1(V)
        query = self.h2(e)
        logits = ag.scale(ag.matmul(query, ag.transpose(keys)), 1.0 / math.sqrt(self.config.attention_dim))
        weights = ag.softmax(logits, axis=1)
        return ag.matmul(weights, values), weights

    def head_forward(self, h: Tensor, d: int) -> Tensor:
        hidden, out = self.heads[d - 1]
        x = mlp_forward(h, hidden) if hidden.layers else h
        logit = out(x)
        return ag.reshape(ag.sigmoid(logit), (logit.shape[0],))

    def forward(self, features, d: int, training: bool = False) -> ForwardResult:
        self._check_domain(d)
        e = self.embed(features)
        s, u = self.towers_forward(e, d, training)
        parts = [s, u]
        weights = None
        if self.mode != "no_dfei":
            v = Tensor(self.bank.vector(d).copy())
            parts.append(ag.broadcast_rows(v, e.shape[0]))
        if self.mode == "full":
            z, w = self.dfi_integrate(e)
            parts.append(z)
            weights = w.data
        prob = self.head_forward(ag.concat(parts, axis=1), d)
        return ForwardResult(prob=prob, u=u.data, weights=weights)


class SharedMLPModel(_BaseModel):
    """Single-domain baseline: one embedding + MLP for all domains, no domain input."""

    def __init__(self, config: ModelConfig, seed: int = 0, mode: str = "mlp"):
        if mode != "mlp":
            raise ConfigError(f"SharedMLPModel only supports mode 'mlp', got {mode!r}")
        super().__init__(config, seed)
        self.mode = "mlp"
        c = config
        in_dim = c.num_fields * c.embed_dim
        self.shared_tower = MLPSpec.create("shared_tower", in_dim, c.tower_dims, self.seed)
        self.head = MLPSpec.create("head", c.feature_dim, c.head_dims, self.seed, seed_name="mlp_head")
        self.head_out = Linear.create("head.out", c.head_dims[-1] if c.head_dims else c.feature_dim, 1,
                                      self.seed, seed_name="mlp_head.out")
        self.bank = None

    @property
    def shared_lr_divisor(self) -> int:
        # every domain is treated as one, so the pooled model trains at the base rate
        return 1

    def param_groups(self) -> list[ParamGroup]:
        head = self.head.tensors()
        head.update(self.head_out.tensors())
        return [
            ParamGroup("embedding", {t.name: t for t in self.embedding}, "shared"),
            ParamGroup("shared_tower", self.shared_tower.tensors(), "shared"),
            ParamGroup("head", head, "shared"),
        ]

    def forward(self, features, d: int, training: bool = False) -> ForwardResult:
        self._check_domain(d)
        e = self.embed(features)
        s = mlp_forward(e, self.shared_tower, self.config.dropout_rates, training, self.rng)
        x = mlp_forward(s, self.head) if self.head.layers else s
        logit = self.head_out(x)
        return ForwardResult(prob=ag.reshape(ag.sigmoid(logit), (logit.shape[0],)))


def build_model(config: ModelConfig, seed: int = 0, mode: str = "full"):
    if mode not in MODES:
        raise ConfigError(f"unknown model mode {mode!r}; choose from {', '.join(MODES)}")
    if mode == "mlp":
        return SharedMLPModel(config, seed)
    return DfeiModel(config, seed, mode)
