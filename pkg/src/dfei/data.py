"""Multi-domain datasets: CSV ingestion, splits, batching and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, GenerationError
from .numcore.nn import derived_rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
_SPLIT_ALIASES = {"train": "train", "validation": "validation", "valid": "validation", "val": "validation", "test": "test"}


@dataclass(frozen=True)
class Sample:
    domain: int
    features: tuple[int, ...]
    label: int


@dataclass
class Batch:
    domain: int
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        if not samples:
            raise ValueError("empty batch")
        domains = {s.domain for s in samples}
        if len(domains) != 1:
            raise ValueError(f"a batch must hold one domain, got {sorted(domains)}")
        return cls(
            domain=samples[0].domain,
            features=np.array([s.features for s in samples], dtype=np.int64),
            labels=np.array([s.label for s in samples], dtype=np.int64),
        )


@dataclass
class SplitData:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DatasetSchema:
    fields: list[str]
    domain_field: str
    label_field: str
    vocabs: list[dict[str, int]] = field(default_factory=list)
    domain_values: list[str] = field(default_factory=list)

    @property
    def vocab_sizes(self) -> list[int]:
        return [len(v) for v in self.vocabs]

    def encode(self, f: int, value: str) -> int:
        vocab = self.vocabs[f]
        return vocab.get(value, len(vocab))


class DomainDataset:
    """Per-domain train/validation/test arrays. Domains are numbered 1..D."""

    def __init__(
        self,
        vocab_sizes: Sequence[int],
        splits: Mapping[str, Sequence[SplitData]],
        field_names: Sequence[str] | None = None,
        domain_names: Sequence[str] | None = None,
        schema: DatasetSchema | None = None,
        meta: dict | None = None,
    ):
        self.vocab_sizes = [int(v) for v in vocab_sizes]
        self.splits = {s: list(splits[s]) for s in SPLITS}
        n = {len(v) for v in self.splits.values()}
        if len(n) != 1:
            raise DataError("every split must list the same number of domains")
        self.num_domains = n.pop()
        self.field_names = list(field_names) if field_names else [f"f{i}" for i in range(len(self.vocab_sizes))]
        self.domain_names = list(domain_names) if domain_names else [str(d) for d in range(1, self.num_domains + 1)]
        self.schema = schema
        self.meta = dict(meta or {})

    @property
    def num_fields(self) -> int:
        return len(self.vocab_sizes)

    def split(self, split: str, d: int) -> SplitData:
        if split not in self.splits:
            raise ValueError(f"unknown split {split!r}")
        if not 1 <= d <= self.num_domains:
            raise ValueError(f"unknown domain {d}")
        return self.splits[split][d - 1]

    def counts(self) -> dict[str, list[int]]:
        return {s: [len(x) for x in self.splits[s]] for s in SPLITS}

    def ctr(self, split: str = "train") -> list[float]:
        return [float(x.labels.mean()) if len(x) else float("nan") for x in self.splits[split]]

    def samples(self, split: str, d: int) -> list[Sample]:
        data = self.split(split, d)
        return [Sample(d, tuple(int(v) for v in row), int(y)) for row, y in zip(data.features, data.labels)]

    def missing_domains(self) -> dict[str, list[int]]:
        return {s: [d + 1 for d, x in enumerate(self.splits[s]) if len(x) == 0] for s in SPLITS}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in SPLITS:
            for x in self.splits[s]:
                h.update(np.ascontiguousarray(x.features, dtype="<i8").tobytes())
                h.update(np.ascontiguousarray(x.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------- batching


class BatchIterator:
    """Endless shuffled passes over ``n`` indices with constant batch size.

    A batch that crosses the end of a pass is completed from the head of the
    next, freshly shuffled pass.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size <= 0:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        if n <= 0:
            raise ValueError("cannot iterate over an empty domain")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0
        self.passes = 1

    def next_indices(self) -> np.ndarray:
        chunks = []
        need = self.batch_size
        while need:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
                self.passes += 1
            take = min(need, self.n - self.pos)
            chunks.append(self.perm[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return chunks[0] if len(chunks) == 1 else np.concatenate(chunks)


class DomainBatcher:
    """One independent :class:`BatchIterator` per domain of a split."""

    def __init__(self, dataset: DomainDataset, batch_size: int, seed: int, split: str = "train"):
        if batch_size <= 0:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        self.dataset = dataset
        self.split_name = split
        self.iterators = {}
        for d in range(1, dataset.num_domains + 1):
            n = len(dataset.split(split, d))
            if n == 0:
                raise ConfigError(f"domain {d} has no {split} samples")
            self.iterators[d] = BatchIterator(n, batch_size, derived_rng(seed, f"batches.{d}"))

    def next_batch(self, d: int) -> Batch:
        idx = self.iterators[d].next_indices()
        data = self.dataset.split(self.split_name, d)
        return Batch(d, data.features[idx], data.labels[idx], idx)

    def state(self) -> dict:
        return {
            str(d): {"rng": it.rng.bit_generator.state, "perm": it.perm.tolist(), "pos": it.pos, "passes": it.passes}
            for d, it in self.iterators.items()
        }

    def load_state(self, state: Mapping) -> None:
        for key, st in state.items():
            it = self.iterators[int(key)]
            it.rng.bit_generator.state = st["rng"]
            it.perm = np.asarray(st["perm"], dtype=np.int64)
            it.pos = int(st["pos"])
            it.passes = int(st["passes"])


def next_batch(batcher: DomainBatcher, d: int) -> Batch:
    return batcher.next_batch(d)


# ---------------------------------------------------------------------- splits


def _key_unit(key: str, seed: int) -> float:
    digest = hashlib.blake2b(f"{seed}\x1f{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0**64


def split_by_key(
    rows: Sequence[Mapping[str, str]],
    key: str,
    ratios: Sequence[float] = (8, 1, 1),
    seed: int = 0,
) -> tuple[list, list, list]:
    """Assign rows to (train, validation, test) by a hash of their key value.

    Every row sharing a key value lands in the same split.
    """
    if not rows:
        raise ValueError("split_by_key needs at least one row")
    total = float(sum(ratios))
    if len(ratios) != 3 or total <= 0 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    cuts = np.cumsum(ratios)[:2] / total
    out: tuple[list, list, list] = ([], [], [])
    cache: dict[str, int] = {}
    for i, row in enumerate(rows):
        if key not in row:
            raise DataError(f"split key {key!r} missing from row {i}")
        value = str(row[key])
        which = cache.get(value)
        if which is None:
            which = cache[value] = int(np.searchsorted(cuts, _key_unit(value, seed), side="right"))
        out[which].append(row)
    return out


# ------------------------------------------------------------------------- CSV


@dataclass
class SchemaSpec:
    fields: list[str]
    domain_column: str
    label_column: str
    delimiter: str = ","
    split: dict = field(default_factory=lambda: {"type": "column", "column": "split"})
    domains: list[str] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "SchemaSpec":
        known = {"fields", "domain_column", "label_column", "delimiter", "split", "domains"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown schema keys: {sorted(extra)}")
        try:
            spec = cls(**dict(d))
        except TypeError as exc:
            raise ConfigError(f"invalid schema: {exc}") from None
        if spec.domains is not None:
            spec.domains = [str(v) for v in spec.domains]
        return spec


def _parse_label(raw: str, line: int) -> int:
    v = raw.strip()
    if v in ("0", "1"):
        return int(v)
    try:
        f = float(v)
    except ValueError:
        f = None
    if f in (0.0, 1.0):
        return int(f)
    raise DataError(f"line {line}: label {raw!r} is not binary")


def _sort_values(values: Iterable[str]) -> list[str]:
    values = list(set(values))
    try:
        return sorted(values, key=lambda v: (float(v), v))
    except ValueError:
        return sorted(values)


def _assign_splits(rows: list[dict], header: list[str], rule: Mapping) -> list[list[int]]:
    """Indices of rows per split (train, validation, test)."""
    kind = rule.get("type", "column")
    if kind == "column":
        col = rule.get("column", "split")
        if col not in header:
            raise DataError(f"split column {col!r} not found in header")
        out: list[list[int]] = [[], [], []]
        for i, row in enumerate(rows):
            name = _SPLIT_ALIASES.get(row[col].strip().lower())
            if name is None:
                raise DataError(f"line {row['__line__']}: unknown split value {row[col]!r}")
            out[SPLITS.index(name)].append(i)
        return out
    if kind == "key":
        key = rule.get("key")
        if key not in header:
            raise DataError(f"split key column {key!r} not found in header")
        for i, row in enumerate(rows):
            row["__idx__"] = i
        parts = split_by_key(rows, key, rule.get("ratios", (8, 1, 1)), int(rule.get("seed", 0)))
        return [[r["__idx__"] for r in p] for p in parts]
    if kind == "range":
        col = rule.get("column")
        if col not in header:
            raise DataError(f"split range column {col!r} not found in header")
        out = [[], [], []]
        for i, row in enumerate(rows):
            v = row[col].strip()
            for s, name in enumerate(SPLITS):
                lo, hi = rule[name]
                if str(lo) <= v <= str(hi):
                    out[s].append(i)
        return out
    raise ConfigError(f"unknown split rule type {kind!r}")


# Date-based protocol for the public short-video log: train Apr 8-21, validation
# Apr 19-21 (inside the training window), test Apr 22 - May 8, 2022.
KUAIRAND_SPLIT = {
    "type": "range",
    "column": "date",
    "train": ["20220408", "20220421"],
    "validation": ["20220419", "20220421"],
    "test": ["20220422", "20220508"],
}
KUAIRAND_DOMAINS = ["0", "1", "2", "4", "5", "6"]


def load_csv(path: str | Path, spec: SchemaSpec | Mapping) -> DomainDataset:
    """Read a flat impression log and partition it by the domain column.

    Vocabularies are fitted on training rows only; anything unseen maps to the
    per-field out-of-vocabulary id ``len(vocab)``.
    """
    if not isinstance(spec, SchemaSpec):
        spec = SchemaSpec.from_dict(spec)
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh, delimiter=spec.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        header = [h.strip() for h in header]
        needed = list(spec.fields) + [spec.domain_column, spec.label_column]
        for col in needed:
            if col not in header:
                raise DataError(f"{path}: column {col!r} not found in header")
        rows = []
        for line, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} columns, got {len(raw)}")
            row = dict(zip(header, raw))
            row["__line__"] = line
            if spec.domains is not None and row[spec.domain_column].strip() not in spec.domains:
                continue
            row["__label__"] = _parse_label(row[spec.label_column], line)
            rows.append(row)

    split_idx = _assign_splits(rows, header, spec.split)
    train_rows = [rows[i] for i in split_idx[0]]
    domain_values = spec.domains if spec.domains is not None else _sort_values(
        r[spec.domain_column].strip() for r in rows
    )
    domain_index = {v: d for d, v in enumerate(domain_values, start=1)}
    vocabs = []
    for f in spec.fields:
        values = _sort_values(r[f] for r in train_rows)
        vocabs.append({v: i for i, v in enumerate(values)})
    schema = DatasetSchema(list(spec.fields), spec.domain_column, spec.label_column, vocabs, list(domain_values))

    D = len(domain_values)
    splits = {}
    for s, idx in zip(SPLITS, split_idx):
        per_domain: list[list[int]] = [[] for _ in range(D)]
        for i in idx:
            per_domain[domain_index[rows[i][spec.domain_column].strip()] - 1].append(i)
        parts = []
        for members in per_domain:
            X = np.array(
                [[schema.encode(f, rows[i][name]) for f, name in enumerate(spec.fields)] for i in members],
                dtype=np.int64,
            ).reshape(len(members), len(spec.fields))
            y = np.array([rows[i]["__label__"] for i in members], dtype=np.int64)
            parts.append(SplitData(X, y))
        splits[s] = parts
    ds = DomainDataset(schema.vocab_sizes, splits, spec.fields, domain_values, schema, {"source": str(path)})
    for s, missing in ds.missing_domains().items():
        if missing:
            logger.warning("split %s has no samples for domains %s", s, missing)
    return ds


def write_csv(dataset: DomainDataset, path: str | Path) -> Path:
    """Write ``dataset`` as one flat CSV with ``split`` and ``domain`` columns."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "domain", *dataset.field_names, "label"])
    for s in SPLITS:
        for d in range(1, dataset.num_domains + 1):
            data = dataset.split(s, d)
            name = dataset.domain_names[d - 1]
            for row, y in zip(data.features.tolist(), data.labels.tolist()):
                w.writerow([s, name, *row, y])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def csv_schema_for(dataset: DomainDataset) -> dict:
    return {
        "fields": list(dataset.field_names),
        "domain_column": "domain",
        "label_column": "label",
        "split": {"type": "column", "column": "split"},
    }


# ------------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Parameters of the latent-factor multi-domain click generator."""

    num_domains: int = 6
    num_users: int = 4000
    num_items: int = 1000
    num_fields: int = 5
    train_samples: int = 120_000
    domain_shares: list[float] | None = None
    target_ctrs: list[float] | None = None
    signal_strength: float = 0.7
    latent_dim: int = 8
    score_scale: float = 4.0
    domain_groups: list[int] | None = None
    context_bits: int = 4
    eval_fraction: float = 0.5
    domains_per_user: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigError("the generator needs at least two domains")
        if self.num_fields < 2:
            raise ConfigError("num_fields must be at least 2 (user id and item id)")
        if self.target_ctrs is None:
            self.target_ctrs = list(np.round(np.linspace(0.02, 0.12, self.num_domains), 6))
        if self.domain_shares is None:
            self.domain_shares = [1.0] * self.num_domains
        if self.domain_groups is None:
            self.domain_groups = list(range(self.num_domains))
        for name in ("target_ctrs", "domain_shares", "domain_groups"):
            if len(getattr(self, name)) != self.num_domains:
                raise ConfigError(f"{name} must have one entry per domain")
        if any(not 0.0 < c < 1.0 for c in self.target_ctrs):
            raise ConfigError("target CTRs must lie in (0, 1)")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError("signal_strength must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _calibrate_bias(logits: np.ndarray, uniforms: np.ndarray, target: float, rounds: int = 100,
                    tol: float = 0.005) -> float:
    """Bisection on a per-domain offset so the realized click rate hits ``target``."""
    lo, hi = -40.0, 40.0
    best, best_err = 0.0, np.inf
    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(uniforms < 1.0 / (1.0 + np.exp(-(logits + mid)))))
        err = abs(rate - target)
        if err < best_err:
            best, best_err = mid, err
        if err < 1e-4:
            break
        if rate < target:
            lo = mid
        else:
            hi = mid
    if best_err > tol:
        raise GenerationError(f"CTR target {target} unreachable: best realized error {best_err:.4f}")
    return best


def gen_synthetic(spec: SyntheticSpec | None = None, **overrides) -> DomainDataset:
    """Generate a multi-domain click dataset from a latent-factor model.

    Users and items carry latent vectors; domain ``d`` scores a pair with the
    weighted inner product ``sum(u * i * w_d)`` where
    ``w_d = (1 - strength) * shared + strength * specific[group(d)]``
    (renormalised), so strength 0 makes every domain share one label function
    and strength 1 makes them independent. Labels are
    Bernoulli draws through a sigmoid whose per-domain offset is bisected so
    the realized training CTR matches the target. Features are the user id,
    the item id and ``num_fields - 2`` locality-sensitive hash buckets of the
    user or item latent vector.
    """
    if spec is None:
        spec = SyntheticSpec(**overrides)
    elif overrides:
        spec = SyntheticSpec(**{**spec.to_dict(), **overrides})
    rng = np.random.default_rng(spec.seed)
    m = spec.latent_dim
    D = spec.num_domains
    users = rng.normal(size=(spec.num_users, m))
    items = rng.normal(size=(spec.num_items, m))
    user_bias = rng.normal(scale=0.5, size=spec.num_users)
    item_bias = rng.normal(scale=0.5, size=spec.num_items)
    shared_w = rng.normal(size=m)
    groups = sorted(set(spec.domain_groups))
    specific = {g: rng.normal(size=m) for g in groups}
    rho = spec.signal_strength
    weights = np.stack([(1.0 - rho) * shared_w + rho * specific[spec.domain_groups[d]] for d in range(D)])
    weights /= np.sqrt((1.0 - rho) ** 2 + rho ** 2)
    k = spec.domains_per_user or D
    if not 1 <= k <= D:
        raise ConfigError(f"domains_per_user must lie in 1..{D}")
    # each user is active in k domains; pools[d] lists the users visible in domain d
    active = np.argsort(rng.random((spec.num_users, D)), axis=1)[:, :k]
    pools = [np.flatnonzero((active == d).any(axis=1)) for d in range(D)]

    n_ctx = spec.num_fields - 2
    planes = rng.normal(size=(n_ctx, spec.context_bits, m))
    powers = 1 << np.arange(spec.context_bits)

    def context(u_idx, i_idx):
        cols = []
        for j in range(n_ctx):
            latent = users[u_idx] if j % 2 == 0 else items[i_idx]
            bits = (latent @ planes[j].T) > 0
            cols.append(bits @ powers)
        return cols

    shares = np.asarray(spec.domain_shares, dtype=float)
    n_train = np.maximum(1, np.round(spec.train_samples * shares / shares.sum()).astype(int))
    splits: dict[str, list[SplitData]] = {s: [] for s in SPLITS}
    realized = []
    biases = []
    for d in range(D):
        n_eval = max(1, int(round(n_train[d] * spec.eval_fraction)))
        sizes = {"train": int(n_train[d]), "validation": n_eval, "test": n_eval}
        total = sum(sizes.values())
        u_idx = pools[d][rng.integers(len(pools[d]), size=total)]
        i_idx = rng.integers(spec.num_items, size=total)
        logits = (spec.score_scale * ((users[u_idx] * items[i_idx]) @ weights[d]) / np.sqrt(m)
                  + user_bias[u_idx] + item_bias[i_idx])
        uniforms = rng.random(total)
        nt = sizes["train"]
        bias = _calibrate_bias(logits[:nt], uniforms[:nt], spec.target_ctrs[d])
        labels = (uniforms < 1.0 / (1.0 + np.exp(-(logits + bias)))).astype(np.int64)
        X = np.column_stack([u_idx, i_idx, *context(u_idx, i_idx)]).astype(np.int64)
        start = 0
        for s in SPLITS:
            stop = start + sizes[s]
            splits[s].append(SplitData(X[start:stop].copy(), labels[start:stop].copy()))
            start = stop
        realized.append(float(labels[:nt].mean()))
        biases.append(bias)

    vocab = [spec.num_users, spec.num_items] + [1 << spec.context_bits] * n_ctx
    field_names = ["user_id", "item_id"] + [f"ctx_{j}" for j in range(n_ctx)]
    meta = {"generator": spec.to_dict(), "realized_train_ctr": realized, "domain_weights": weights.tolist(),
            "domain_bias": biases}
    return DomainDataset(vocab, splits, field_names, [str(d) for d in range(1, D + 1)], None, meta)
