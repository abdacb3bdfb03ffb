"""Joint multi-domain optimization.

Each global step visits domains 1..D in order and takes one mini-batch step
per domain. Domain-specific parameters move with step size ``lr``; shared
parameters, which are stepped D times per global step, move with ``lr / D``.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import DomainBatcher, DomainDataset
from .errors import ConfigError, NumericError
from .metrics import evaluate_all
from .model import MODES
from .numcore import autograd as ag
from .numcore.autograd import Tensor
from .numcore.optim import Adam

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 512
    lr: float = 1e-3
    l2: float = 1e-6
    epochs: int = 10
    patience: int = 3
    seed: int = 0
    mode: str = "full"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be non-negative")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy_loss(prob, labels) -> Tensor:
    """Batch-mean binary cross-entropy on probabilities clamped to [1e-12, 1 - 1e-12]."""
    if not isinstance(prob, Tensor):
        prob = Tensor(prob)
    labels = np.asarray(labels)
    if labels.shape != prob.shape:
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {prob.shape[0]} predictions")
    return ag.binary_cross_entropy(prob, labels)


def l2_penalty(params: dict[str, Tensor], l2: float) -> Tensor | None:
    """``l2 * sum ||w||^2`` over weight tensors; bias vectors are excluded."""
    terms = [ag.sum_squares(t) for n, t in params.items() if not n.endswith(".b")]
    if l2 == 0 or not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.scale(total, l2)


@dataclass
class StepReport:
    domain: int
    loss: float
    data_loss: float
    grad_norm_shared: float
    grad_norm_domain: float
    lr_shared: float
    lr_domain: float


def _norm(grads: dict[str, np.ndarray], names) -> float:
    return math.sqrt(math.fsum(float(np.sum(grads[n] * grads[n])) for n in names))


def train_step(model, optimizer: Adam, d: int, batch, lr: float = 1e-3, l2: float = 1e-6) -> StepReport:
    """One gradient step on a batch from domain ``d``, then the bank update."""
    if len(batch.labels) == 0:
        raise ValueError("empty batch")
    out = model.forward(batch.features, d, training=True)
    data_loss = cross_entropy_loss(out.prob, batch.labels)
    shared, specific = model.update_sets(d)
    update = {**shared, **specific}
    reg = l2_penalty(update, l2)
    loss = data_loss if reg is None else ag.add(data_loss, reg)
    if not np.isfinite(loss.data):
        p = out.prob.data
        raise NumericError(
            f"non-finite loss on domain {d}: data loss {float(data_loss.data)!r}, "
            f"prediction range [{p.min()!r}, {p.max()!r}]"
        )
    grads = ag.compute_gradients(loss, update)
    lr_shared = lr / model.shared_lr_divisor
    if specific:
        optimizer.step(specific, {n: grads[n] for n in specific}, lr)
    optimizer.step(shared, {n: grads[n] for n in shared}, lr_shared)
    if model.bank is not None:
        model.bank.update(d, out.u)
    return StepReport(
        domain=d,
        loss=float(loss.data),
        data_loss=float(data_loss.data),
        grad_norm_shared=_norm(grads, shared),
        grad_norm_domain=_norm(grads, specific),
        lr_shared=lr_shared,
        lr_domain=lr,
    )


def warm_up_bank(model, dataset: DomainDataset, batch_size: int) -> None:
    """Initialise every domain feature from one gradient-free eval-mode batch.

    Uses the first ``batch_size`` training rows of each domain in stored order,
    so the training batch streams are untouched.
    """
    bank = getattr(model, "bank", None)
    if bank is None:
        return
    for d in range(1, dataset.num_domains + 1):
        if bank.initialized[d - 1]:
            continue
        feats = dataset.split("train", d).features[:batch_size]
        e = model.embed(feats)
        _, u = model.towers_forward(e, d, training=False)
        bank.update(d, u.data)


def steps_per_epoch(dataset: DomainDataset, batch_size: int) -> int:
    return math.ceil(max(len(x) for x in dataset.splits["train"]) / batch_size)


@dataclass
class TrainReport:
    config: dict
    steps_per_epoch: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_avg_auc: float = -math.inf
    stopped_early: bool = False
    global_steps: int = 0
    checkpoint: str | None = None
    batch_sha256: list[str] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        # wall-clock times are kept out of the deterministic report
        d.pop("wall_times")
        return d


def fit(model, dataset: DomainDataset, config: TrainConfig, out_dir=None, optimizer: Adam | None = None,
        eval_split: str = "validation") -> TrainReport:
    """Train with early stopping on the unweighted mean validation AUC.

    On return the model holds the best epoch's parameters and bank; if
    ``out_dir`` is set, that state is also written to ``out_dir/best.ckpt``.
    """
    if dataset.num_domains != model.config.num_domains:
        raise ConfigError(f"dataset has {dataset.num_domains} domains, model expects {model.config.num_domains}")
    empty = [d for d in range(1, dataset.num_domains + 1) if len(dataset.split("train", d)) == 0]
    if empty:
        raise ConfigError(f"domain {empty[0]} has no training samples")
    optimizer = optimizer or Adam()
    batcher = DomainBatcher(dataset, config.batch_size, config.seed)
    warm_up_bank(model, dataset, config.batch_size)
    steps = steps_per_epoch(dataset, config.batch_size)
    report = TrainReport(config=config.to_dict(), steps_per_epoch=steps)
    ckpt_path = Path(out_dir) / "best.ckpt" if out_dir is not None else None
    best_state = None
    bad_epochs = 0
    global_step = 0
    D = dataset.num_domains
    extra = {"train_ctr": dataset.ctr("train"), "domain_names": dataset.domain_names,
             "field_names": dataset.field_names, "data_fingerprint": dataset.fingerprint()}
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        losses = {d: [] for d in range(1, D + 1)}
        # per-epoch digest of the batches consumed, for auditing that variants saw the same stream
        batch_digest = hashlib.sha256()
        for _ in range(steps):
            for d in range(1, D + 1):
                batch = batcher.next_batch(d)
                batch_digest.update(np.ascontiguousarray(batch.indices, dtype="<i8").tobytes())
                rep = train_step(model, optimizer, d, batch, config.lr, config.l2)
                losses[d].append(rep.data_loss)
            global_step += 1
        val = evaluate_all(model, dataset, eval_split)
        record = {
            "epoch": epoch,
            "train_loss": {str(d): math.fsum(v) / len(v) for d, v in losses.items()},
            "val_auc": {str(d): a for d, a in val.per_domain_auc.items()},
            "val_avg_auc": val.average_auc,
            "passes": {str(d): it.passes for d, it in batcher.iterators.items()},
        }
        report.epochs.append(record)
        report.batch_sha256.append(batch_digest.hexdigest())
        report.wall_times.append(time.perf_counter() - started)
        logger.info("epoch %d: val avg AUC %.5f", epoch, val.average_auc)
        if val.average_auc > report.best_val_avg_auc:
            report.best_val_avg_auc = val.average_auc
            report.best_epoch = epoch
            bad_epochs = 0
            best_state = (model.state_dict(), copy.deepcopy(optimizer.states), global_step, epoch)
            if ckpt_path is not None:
                save_checkpoint(model, optimizer, ckpt_path, global_step=global_step, epoch=epoch,
                                best_metric=val.average_auc, extra=extra)
                report.checkpoint = ckpt_path.name
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                report.stopped_early = epoch < config.epochs
                break
    report.global_steps = global_step
    if best_state is not None:
        state, opt_states, _, _ = best_state
        model.load_state_dict(state)
        optimizer.states = opt_states
    return report
