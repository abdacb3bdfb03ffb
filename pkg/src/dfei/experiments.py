"""Multi-seed experiments: ablation, alpha sweep, domain-feature export."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .data import DomainDataset
from .errors import ConfigError, StateError
from .metrics import evaluate_all
from .model import ModelConfig, build_model
from .stats import paired_t_test
from .train import TrainConfig, fit, warm_up_bank

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_dfi", "no_dfei", "mlp")
ALPHA_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)

DatasetFactory = Callable[[int], DomainDataset]


def _as_factory(data) -> DatasetFactory:
    if isinstance(data, DomainDataset):
        return lambda seed: data
    return data


def _model_config(dataset: DomainDataset, overrides: dict | None) -> ModelConfig:
    return ModelConfig(dataset.num_domains, dataset.vocab_sizes, **(overrides or {}))


@dataclass
class RunRecord:
    seed: int
    variant: str
    per_domain_auc: dict[str, float]
    average_auc: float
    best_epoch: int
    epochs_run: int
    best_val_avg_auc: float
    batch_sha256: list[str]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_and_test(dataset: DomainDataset, model_overrides: dict | None, train_config: TrainConfig,
                   seed: int, split: str = "test"):
    """Fit one model with ``seed`` for both initialization and batching, then evaluate."""
    tc = dataclasses.replace(train_config, seed=seed)
    model = build_model(_model_config(dataset, model_overrides), seed, tc.mode)
    report = fit(model, dataset, tc)
    ev = evaluate_all(model, dataset, split, seed=seed, variant=tc.mode)
    record = RunRecord(
        seed=seed,
        variant=tc.mode,
        per_domain_auc={str(d): a for d, a in ev.per_domain_auc.items()},
        average_auc=ev.average_auc,
        best_epoch=report.best_epoch,
        epochs_run=len(report.epochs),
        best_val_avg_auc=report.best_val_avg_auc,
        batch_sha256=list(report.batch_sha256),
    )
    return model, report, record


@dataclass
class AblationResult:
    seeds: list[int]
    variants: list[str]
    records: list[RunRecord] = field(default_factory=list)

    def averages(self, variant: str) -> list[float]:
        by_seed = {r.seed: r.average_auc for r in self.records if r.variant == variant}
        return [by_seed[s] for s in self.seeds]

    def batch_audit(self) -> dict[str, bool]:
        """Per seed: did every DFEI variant consume the identical batch stream?

        The pooled MLP baseline is included; it draws from the same per-domain
        streams in the same order, so its digests must match as well. Runs stop
        early at different epochs, so only the epochs all runs reached are compared.
        """
        out = {}
        for s in self.seeds:
            runs = [r.batch_sha256 for r in self.records if r.seed == s]
            common = min(len(r) for r in runs)
            out[str(s)] = common > 0 and len({tuple(r[:common]) for r in runs}) == 1
        return out

    def summary(self) -> dict:
        table = {}
        for v in self.variants:
            recs = [r for r in self.records if r.variant == v]
            domains = sorted({d for r in recs for d in r.per_domain_auc}, key=int)
            per_domain = {}
            for d in domains:
                vals = [r.per_domain_auc[d] for r in recs if d in r.per_domain_auc]
                per_domain[d] = math.fsum(vals) / len(vals)
            avgs = self.averages(v)
            table[v] = {
                "per_domain_mean_auc": per_domain,
                "mean_avg_auc": math.fsum(avgs) / len(avgs),
                "avg_auc_by_seed": avgs,
            }
        tests = {}
        if "full" in self.variants:
            full = self.averages("full")
            for v in self.variants:
                if v == "full":
                    continue
                r = paired_t_test(full, self.averages(v))
                tests[f"full_vs_{v}"] = dataclasses.asdict(r)
            others = [v for v in self.variants if v != "full"]
            if others:
                best = max(others, key=lambda v: table[v]["mean_avg_auc"])
                tests["best_other_variant"] = best
        return {"variants": table, "t_tests": tests, "batch_audit": self.batch_audit()}

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "variants": self.variants,
            "runs": [r.to_dict() for r in self.records],
            "summary": self.summary(),
        }


def run_ablation(data, seeds: Sequence[int], model_overrides: dict | None = None,
                 train_config: TrainConfig | None = None, variants: Sequence[str] = VARIANTS,
                 split: str = "test") -> AblationResult:
    """Train every variant on every seed under identical data and batch streams.

    ``data`` is a dataset or a ``seed -> dataset`` factory; the factory form
    lets each seed draw a fresh synthetic dataset shared by all variants.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ConfigError("an ablation needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("ablation seeds must be distinct")
    train_config = train_config or TrainConfig()
    factory = _as_factory(data)
    result = AblationResult(seeds, list(variants))
    for s in seeds:
        dataset = factory(s)
        for v in variants:
            _, _, record = train_and_test(dataset, model_overrides, dataclasses.replace(train_config, mode=v), s,
                                          split)
            logger.info("seed %d %s: %s avg AUC %.5f", s, v, split, record.average_auc)
            result.records.append(record)
    return result


# ------------------------------------------------------------- domain features


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise StateError("a domain feature vector is all zeros; cosine similarity is undefined")
    unit = vectors / norms[:, None]
    return unit @ unit.T


def export_domain_features(source, out_dir, train_ctr: Sequence[float] | None = None,
                           domain_names: Sequence[str] | None = None) -> dict[str, Path]:
    """Write ``domain_features.csv`` (one row per v_d) and ``domain_cosine.csv``.

    ``source`` is a checkpoint path or a model. Train CTRs and domain names
    default to those recorded in the checkpoint at training time.
    """
    extra = {}
    if isinstance(source, (str, Path)):
        model, _, header = load_checkpoint(source)
        extra = header.get("extra") or {}
    else:
        model = source
    bank = getattr(model, "bank", None)
    if bank is None:
        raise StateError(f"model variant {model.mode!r} has no domain feature bank")
    bank.require_all()
    D, dim = bank.vectors.shape
    ctr = list(train_ctr) if train_ctr is not None else extra.get("train_ctr", [float("nan")] * D)
    names = list(domain_names) if domain_names is not None else extra.get("domain_names",
                                                                           [str(d) for d in range(1, D + 1)])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feat_path = out / "domain_features.csv"
    with open(feat_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "name", "train_ctr"] + [f"v{j}" for j in range(dim)])
        for d in range(D):
            w.writerow([d + 1, names[d], repr(float(ctr[d]))] + [repr(float(x)) for x in bank.vectors[d]])
    cos = cosine_matrix(bank.vectors)
    cos_path = out / "domain_cosine.csv"
    with open(cos_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain"] + [str(d) for d in range(1, D + 1)])
        for d in range(D):
            w.writerow([d + 1] + [repr(float(x)) for x in cos[d]])
    return {"features": feat_path, "cosine": cos_path}


def cluster_similarity(cos: np.ndarray, groups: Sequence[int]) -> tuple[float, float]:
    """Mean off-diagonal cosine within groups and across groups."""
    g = np.asarray(groups)
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(g), dtype=bool)
    return float(cos[same & off].mean()), float(cos[~same].mean())


# ------------------------------------------------------------------ alpha sweep


@dataclass
class SweepResult:
    values: list[float]
    seeds: list[int]
    runs: list[dict] = field(default_factory=list)

    def table(self) -> list[dict]:
        rows = []
        for a in self.values:
            avgs = [r["average_auc"] for r in self.runs if r["alpha"] == a]
            rows.append({"alpha": a, "mean_avg_auc": math.fsum(avgs) / len(avgs), "avg_auc_by_seed": avgs})
        return rows

    def to_dict(self) -> dict:
        return {"values": self.values, "seeds": self.seeds, "runs": self.runs, "table": self.table()}


def alpha_sweep(data, values: Sequence[float] = ALPHA_GRID, seeds: Sequence[int] = (0,),
                model_overrides: dict | None = None, train_config: TrainConfig | None = None,
                split: str = "test") -> SweepResult:
    """One full-model fit per (alpha, seed); records whether the bank moved after warm-up."""
    values = [float(a) for a in values]
    if not values or any(not 0.0 <= a <= 1.0 for a in values):
        raise ConfigError("alpha values must lie in [0, 1]")
    train_config = dataclasses.replace(train_config or TrainConfig(), mode="full")
    factory = _as_factory(data)
    result = SweepResult(values, [int(s) for s in seeds])
    for s in result.seeds:
        dataset = factory(s)
        for a in values:
            overrides = dict(model_overrides or {}, alpha=a)
            model = build_model(_model_config(dataset, overrides), s, "full")
            warm_up_bank(model, dataset, train_config.batch_size)
            warm = model.bank.vectors.copy()
            report = fit(model, dataset, dataclasses.replace(train_config, seed=s))
            ev = evaluate_all(model, dataset, split, seed=s, variant="full")
            result.runs.append({
                "alpha": a,
                "seed": s,
                "average_auc": ev.average_auc,
                "per_domain_auc": {str(d): v for d, v in ev.per_domain_auc.items()},
                "best_epoch": report.best_epoch,
                "bank_frozen": bool(np.array_equal(warm, model.bank.vectors)),
            })
    return result
