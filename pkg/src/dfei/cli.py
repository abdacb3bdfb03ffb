"""Command-line entry point: ``dfei <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 data or checkpoint
error, 4 numeric failure. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import csv_schema_for, write_csv
from .errors import ConfigError, DataError, DfeiError, NumericError
from .experiments import alpha_sweep, export_domain_features, run_ablation
from .metrics import evaluate_all
from .model import build_model
from .train import fit

logger = logging.getLogger("dfei")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------- helpers


def _dump_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_manifest(out: Path, command: str, inputs: dict, seeds, outputs: list[Path]) -> Path:
    """Record inputs, seeds, versions and output hashes; ``input_hash`` digests the inputs alone."""
    inputs = dict(sorted(inputs.items()))
    key = json.dumps({"command": command, "inputs": inputs, "seeds": list(seeds)}, sort_keys=True)
    manifest = {
        "command": command,
        "inputs": inputs,
        "seeds": list(seeds),
        "input_hash": _sha256_text(key),
        "versions": {"dfei": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {p.name: _sha256_file(p) for p in sorted(outputs)},
    }
    return _dump_json(manifest, out / "manifest.json")


def _config_inputs(cfg: RunConfig) -> dict:
    inputs = {"config": _sha256_text(cfg.dumps())}
    path = cfg.data_path()
    if path is not None:
        try:
            inputs["data"] = _sha256_file(path)
        except FileNotFoundError:
            raise DataError(f"data file not found: {path}") from None
    return inputs


def _prepare_out(cfg: RunConfig, override: str | None) -> Path:
    out = cfg.output_dir(override)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_seeds(text: str) -> list[int]:
    """``"1..5"`` (inclusive range) or ``"0,2,7"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"cannot parse seeds {text!r}; use '1..5' or '0,1,2'") from None
    if not seeds:
        raise UsageError(f"no seeds in {text!r}")
    return seeds


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse value list {text!r}") from None


def _with_resolved(cfg: RunConfig, out: Path) -> Path:
    path = out / "config.resolved.json"
    path.write_text(cfg.dumps(), encoding="utf-8")
    return path


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    inputs = _config_inputs(cfg)
    out = _prepare_out(cfg, args.out)
    dataset = cfg.load_dataset()
    model = build_model(cfg.model_config(dataset), cfg.train.seed, cfg.train.mode)
    report = fit(model, dataset, cfg.train, out_dir=out)
    for rec, secs in zip(report.epochs, report.wall_times):
        logger.info("epoch %d took %.1fs", rec["epoch"], secs)
    written = [_with_resolved(cfg, out), _dump_json(report.to_dict(), out / "train_report.json")]
    if report.checkpoint:
        written.append(out / report.checkpoint)
    _write_manifest(out, "train", inputs, [cfg.train.seed], written)
    print(f"best validation avg AUC {report.best_val_avg_auc:.6f} at epoch {report.best_epoch}; wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = RunConfig.load(args.config)
    split = args.split or cfg.eval.split
    model, _, header = load_checkpoint(args.checkpoint)
    dataset = cfg.load_dataset()
    if dataset.num_domains != model.config.num_domains or dataset.vocab_sizes != model.config.vocab_sizes:
        raise DataError(
            f"dataset ({dataset.num_domains} domains, vocab {dataset.vocab_sizes}) does not match the "
            f"checkpoint ({model.config.num_domains} domains, vocab {model.config.vocab_sizes})"
        )
    fp = (header.get("extra") or {}).get("data_fingerprint")
    if fp is not None and fp != dataset.fingerprint():
        logger.warning("dataset differs from the one the checkpoint was trained on")
    report = evaluate_all(model, dataset, split, seed=header.get("seed"), variant=header.get("mode"))
    inputs = _config_inputs(cfg)
    inputs["checkpoint"] = _sha256_file(Path(args.checkpoint))
    out = _prepare_out(cfg, args.out)
    written = [_dump_json(report.to_dict(), out / f"eval_report_{split}.json")]
    _write_manifest(out, "evaluate", inputs, [header.get("seed")], written)
    print(f"{split} avg AUC {report.average_auc:.6f} over {len(report.per_domain_auc)} domains; wrote {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    if cfg.data["source"] != "synthetic":
        raise ConfigError("gen-data needs a synthetic data section")
    out = _prepare_out(cfg, args.out)
    dataset = cfg.load_dataset()
    data_path = write_csv(dataset, out / "data.csv")
    schema = csv_schema_for(dataset)
    # a ready-to-train config pointing at the CSV, relative to this directory
    derived = cfg.to_dict()
    derived["data"] = {"source": "csv", "path": "data.csv", "schema": schema}
    derived["output"] = {"dir": "."}
    train_cfg = RunConfig.from_dict(derived, out)
    cfg_path = out / "config.json"
    cfg_path.write_text(train_cfg.dumps(), encoding="utf-8")
    meta_path = _dump_json({"counts": dataset.counts(), **dataset.meta}, out / "data_meta.json")
    _write_manifest(out, "gen-data", _config_inputs(cfg), [cfg.data["synthetic"]["seed"]],
                    [data_path, cfg_path, meta_path])
    print(f"wrote {sum(sum(c) for c in dataset.counts().values())} rows to {data_path}")
    return EXIT_OK


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg.eval.seeds
    inputs = _config_inputs(cfg)
    out = _prepare_out(cfg, args.out)
    result = run_ablation(cfg.dataset_factory(), seeds, cfg.model, cfg.train, cfg.eval.variants, cfg.eval.split)
    summary = result.to_dict()
    domains = sorted({d for r in result.records for d in r.per_domain_auc}, key=int)
    rows = [[r.seed, r.variant, repr(r.average_auc)] + [repr(r.per_domain_auc.get(d, float("nan"))) for d in domains]
            for r in result.records]
    written = [
        _with_resolved(cfg, out),
        _dump_json(summary, out / "ablation.json"),
        _write_rows(out / "ablation_runs.csv", ["seed", "variant", "avg_auc"] + [f"auc_{d}" for d in domains], rows),
    ]
    _write_manifest(out, "ablate", inputs, seeds, written)
    table = summary["summary"]["variants"]
    for v in result.variants:
        print(f"{v:8s} mean avg AUC {table[v]['mean_avg_auc']:.5f}")
    for name, t in summary["summary"]["t_tests"].items():
        if isinstance(t, dict):
            print(f"{name}: t={t['t']:.3f} p={t['p']:.4g}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    out = Path(args.out) if args.out else RunConfig.defaults().output_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = export_domain_features(args.checkpoint, out)
    _write_manifest(out, "export-features", {"checkpoint": _sha256_file(Path(args.checkpoint))}, [],
                    list(paths.values()))
    print(f"wrote {paths['features']} and {paths['cosine']}")
    return EXIT_OK


def cmd_alpha_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg.eval.seeds
    values = _parse_floats(args.values) if args.values else cfg.eval.alpha_grid
    inputs = _config_inputs(cfg)
    out = _prepare_out(cfg, args.out)
    result = alpha_sweep(cfg.dataset_factory(), values, seeds, cfg.model, cfg.train, cfg.eval.split)
    table = result.table()
    written = [
        _with_resolved(cfg, out),
        _dump_json(result.to_dict(), out / "alpha_sweep.json"),
        _write_rows(out / "alpha_sweep.csv", ["alpha", "mean_avg_auc"],
                    [[repr(r["alpha"]), repr(r["mean_avg_auc"])] for r in table]),
    ]
    _write_manifest(out, "alpha-sweep", inputs, seeds, written)
    for r in table:
        print(f"alpha {r['alpha']:.2f}: mean avg AUC {r['mean_avg_auc']:.5f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfei", description="Multi-domain CTR training with domain feature extraction and integration.")
    p.add_argument("--print-config", nargs="?", const="", metavar="CONFIG",
                   help="print the resolved configuration (defaults if no file is given) and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"dfei {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model and write checkpoint, report and resolved config")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--split", choices=("train", "validation", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV plus a matching config")
    g.add_argument("config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("ablate", help="train all variants over several seeds and compare")
    a.add_argument("config")
    a.add_argument("--seeds", help="'1..5' or '0,1,2' (default: eval.seeds)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-features", help="export the domain feature vectors of a checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_features)

    s = sub.add_parser("alpha-sweep", help="train the full model over a grid of decay values")
    s.add_argument("config")
    s.add_argument("--values", help="comma-separated alphas (default: eval.alpha_grid)")
    s.add_argument("--seeds")
    s.add_argument("--out")
    s.set_defaults(func=cmd_alpha_sweep)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_DATA


def _report_error(exc: BaseException, code: int) -> None:
    line = json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)})
    print(line, file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.print_config is not None:
            cfg = RunConfig.load(args.print_config) if args.print_config else RunConfig.defaults()
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        if not args.command:
            raise UsageError("dfei: a command is required (train, evaluate, gen-data, ablate, export-features, "
                             "alpha-sweep)")
        return args.func(args)
    except (DfeiError, OSError) as exc:
        code = _exit_code(exc)
        _report_error(exc, code)
        return code


if __name__ == "__main__":
    sys.exit(main())
