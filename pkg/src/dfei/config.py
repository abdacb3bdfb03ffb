"""JSON run configuration with strict key checking and a resolved echo."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .data import SchemaSpec, SyntheticSpec, gen_synthetic, load_csv
from .errors import ConfigError
from .experiments import ALPHA_GRID, VARIANTS
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = ("data", "model", "train", "eval", "output")
OUTPUT_ENV = "DFEI_OUTPUT_DIR"

# ModelConfig fields that come from the data rather than the config file
_DERIVED_MODEL_FIELDS = {"num_domains", "vocab_sizes"}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: Mapping, allowed: set[str]) -> None:
    if not isinstance(given, Mapping):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _model_defaults() -> dict:
    cfg = ModelConfig(num_domains=1, vocab_sizes=[1]).to_dict()
    return {k: v for k, v in cfg.items() if k not in _DERIVED_MODEL_FIELDS}


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split: str = "test"
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    alpha_grid: list[float] = field(default_factory=lambda: list(ALPHA_GRID))

    def __post_init__(self):
        if self.split not in ("train", "validation", "test"):
            raise ConfigError(f"eval split must be train, validation or test, got {self.split!r}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise ConfigError("alpha_grid values must lie in [0, 1]")


@dataclass
class RunConfig:
    data: dict
    model: dict
    train: TrainConfig
    eval: EvalConfig
    output: dict
    base_dir: Path = field(default=Path("."), compare=False)

    # ---------------------------------------------------------------- parse
    @classmethod
    def from_dict(cls, raw: Mapping, base_dir: Path | str = ".") -> "RunConfig":
        _check_keys("config", raw, set(SECTIONS))
        data = dict(raw.get("data", {"source": "synthetic"}))
        _check_keys("data", data, {"source", "synthetic", "path", "schema"})
        source = data.get("source", "synthetic")
        if source == "synthetic":
            if "path" in data or "schema" in data:
                raise ConfigError("data.path and data.schema apply only to source 'csv'")
            syn = data.get("synthetic", {})
            _check_keys("data.synthetic", syn, _field_names(SyntheticSpec))
            data = {"source": "synthetic", "synthetic": SyntheticSpec(**syn).to_dict()}
        elif source == "csv":
            if "path" not in data or "schema" not in data:
                raise ConfigError("csv data needs both data.path and data.schema")
            schema = SchemaSpec.from_dict(data["schema"])
            data = {"source": "csv", "path": str(data["path"]), "schema": dataclasses.asdict(schema)}
        else:
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {source!r}")

        model = raw.get("model", {})
        _check_keys("model", model, _field_names(ModelConfig) - _DERIVED_MODEL_FIELDS)
        model = {**_model_defaults(), **model}
        # validate now, with placeholder data-derived fields
        ModelConfig(num_domains=1, vocab_sizes=[1], **model)

        train = raw.get("train", {})
        _check_keys("train", train, _field_names(TrainConfig))
        ev = raw.get("eval", {})
        _check_keys("eval", ev, _field_names(EvalConfig))
        output = raw.get("output", {})
        _check_keys("output", output, {"dir"})
        try:
            return cls(data, model, TrainConfig(**train), EvalConfig(**ev),
                       {"dir": str(output.get("dir", "runs/default"))}, Path(base_dir))
        except TypeError as exc:
            raise ConfigError(f"invalid config value: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(raw, path.parent)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_dict({})

    # ----------------------------------------------------------------- use
    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "model": self.model,
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "output": self.output,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def data_path(self) -> Path | None:
        if self.data["source"] != "csv":
            return None
        p = Path(self.data["path"])
        return p if p.is_absolute() else self.base_dir / p

    def output_dir(self, override: str | None = None, env: Mapping[str, str] | None = None) -> Path:
        """``--out`` beats the environment variable, which beats the config file."""
        env = os.environ if env is None else env
        if override:
            return Path(override)
        if env.get(OUTPUT_ENV):
            return Path(env[OUTPUT_ENV])
        p = Path(self.output["dir"])
        return p if p.is_absolute() else self.base_dir / p

    def synthetic_spec(self, seed_offset: int = 0) -> SyntheticSpec:
        syn = dict(self.data["synthetic"])
        syn["seed"] = int(syn["seed"]) + int(seed_offset)
        return SyntheticSpec(**syn)

    def load_dataset(self, seed_offset: int = 0):
        """Build the dataset; synthetic data seeds shift by ``seed_offset``."""
        if self.data["source"] == "synthetic":
            return gen_synthetic(self.synthetic_spec(seed_offset))
        return load_csv(self.data_path(), self.data["schema"])

    def dataset_factory(self):
        """``seed -> dataset``: synthetic data is redrawn per seed, CSV data is loaded once."""
        if self.data["source"] == "synthetic":
            return lambda s: self.load_dataset(seed_offset=s)
        dataset = self.load_dataset()
        return lambda s: dataset

    def model_config(self, dataset) -> ModelConfig:
        return ModelConfig(dataset.num_domains, dataset.vocab_sizes, **self.model)

    def with_train(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))
