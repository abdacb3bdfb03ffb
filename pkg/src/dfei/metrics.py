"""AUC and per-domain evaluation reports."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import UndefinedMetricError

logger = logging.getLogger(__name__)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-sum (Mann-Whitney) AUC; tied scores share their average rank."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # 1-based average rank of each tie block
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    block_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(block_rank, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    per_domain_auc: dict[int, float]
    average_auc: float
    counts: dict[int, int] = field(default_factory=dict)
    seed: int | None = None
    variant: str | None = None
    split: str | None = None
    skipped: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_domain_auc"] = {str(k): v for k, v in self.per_domain_auc.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        return d


def aggregate(per_domain: Mapping[int, float], **kwargs) -> EvalReport:
    """Build a report whose average is the unweighted mean over domains."""
    values = [per_domain[d] for d in sorted(per_domain)]
    avg = math.fsum(values) / len(values) if values else float("nan")
    return EvalReport(dict(sorted(per_domain.items())), avg, **kwargs)


def evaluate_all(model, dataset, split: str = "test", seed: int | None = None,
                 variant: str | None = None) -> EvalReport:
    per_domain: dict[int, float] = {}
    counts: dict[int, int] = {}
    skipped = []
    for d in range(1, dataset.num_domains + 1):
        data = dataset.split(split, d)
        counts[d] = len(data)
        if len(data) == 0:
            logger.warning("domain %d has no %s samples; skipped", d, split)
            skipped.append(d)
            continue
        scores = model.predict(data.features, d, training=False)
        try:
            per_domain[d] = auc(scores, data.labels)
        except UndefinedMetricError:
            logger.warning("domain %d %s split has a single class; skipped", d, split)
            skipped.append(d)
    return aggregate(per_domain, counts=counts, seed=seed, variant=variant if variant else getattr(model, "mode", None),
                     split=split, skipped=skipped)
