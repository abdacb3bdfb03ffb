import csv
import subprocess
from collections import Counter

import numpy as np
import pytest

from dfei.data import (
    BatchIterator,
    DomainBatcher,
    SchemaSpec,
    _calibrate_bias,
    csv_schema_for,
    gen_synthetic,
    load_csv,
    split_by_key,
    write_csv,
)
from dfei.errors import DataError, GenerationError


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


SPEC = {"fields": ["user", "item"], "domain_column": "tab", "label_column": "click"}


# ------------------------------------------------------------------ load_csv


def test_three_rows_two_domains(tmp_path):
    p = write_rows(tmp_path / "a.csv", ["user", "item", "tab", "click", "split"],
                   [["u1", "i1", "0", "1", "train"], ["u2", "i1", "0", "0", "train"], ["u1", "i2", "1", "0", "train"]])
    ds = load_csv(p, SPEC)
    assert ds.num_domains == 2
    assert ds.counts()["train"] == [2, 1]
    assert ds.domain_names == ["0", "1"]


def test_unseen_test_value_maps_to_oov(tmp_path):
    p = write_rows(tmp_path / "a.csv", ["user", "item", "tab", "click", "split"],
                   [["u1", "i1", "0", "1", "train"], ["u2", "i2", "0", "0", "train"],
                    ["u9", "i1", "0", "1", "test"], ["u1", "i1", "0", "0", "validation"]])
    ds = load_csv(p, SPEC)
    assert ds.vocab_sizes == [2, 2]
    assert ds.split("test", 1).features.tolist() == [[2, 0]]


def test_vocabulary_fit_on_train_only(tmp_path):
    rows = [["u1", "i1", "0", "1", "train"], ["u2", "i1", "0", "0", "train"]]
    rows += [[f"x{i}", f"y{i}", "0", "1", "validation" if i % 2 else "test"] for i in range(20)]
    ds = load_csv(write_rows(tmp_path / "a.csv", ["user", "item", "tab", "click", "split"], rows), SPEC)
    assert ds.vocab_sizes == [2, 1]
    assert set(ds.split("validation", 1).features.ravel()) == {2, 1}


@pytest.mark.parametrize(
    "rows,match",
    [
        ([["u1", "i1", "0", "2", "train"]], "line 2"),
        ([["u1", "i1", "0", "1", "train"], ["u1", "i1", "0"]], "line 3"),
        ([["u1", "i1", "0", "yes", "train"]], "not binary"),
    ],
)
def test_bad_rows_report_line(tmp_path, rows, match):
    p = write_rows(tmp_path / "a.csv", ["user", "item", "tab", "click", "split"], rows)
    with pytest.raises(DataError, match=match):
        load_csv(p, SPEC)


def test_missing_column(tmp_path):
    p = write_rows(tmp_path / "a.csv", ["user", "tab", "click", "split"], [["u", "0", "1", "train"]])
    with pytest.raises(DataError, match="'item'"):
        load_csv(p, SPEC)


KUAIRAND_HEADER = ["user_id", "video_id", "date", "hourmin", "time_ms", "is_click", "is_like", "is_follow",
                   "is_comment", "is_forward", "is_hate", "long_view", "play_time_ms", "duration_ms",
                   "profile_stay_time", "comment_stay_time", "is_profile_enter", "is_rand", "tab"]


def test_kuairand_extract_counts_match_shell(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    dates = ["20220410", "20220415", "20220420", "20220425", "20220501"]
    for _ in range(600):
        tab = int(rng.choice([0, 1, 2, 3, 4, 5, 6, 8]))
        rows.append([int(rng.integers(1000)), int(rng.integers(300)), rng.choice(dates), 1200, 0,
                     int(rng.random() < 0.3), 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, tab])
    p = write_rows(tmp_path / "log_standard.csv", KUAIRAND_HEADER, rows)
    spec = {
        "fields": ["user_id", "video_id"],
        "domain_column": "tab",
        "label_column": "is_click",
        "domains": [0, 1, 2, 4, 5, 6],
        "split": {"type": "range", "column": "date", "train": ["20220408", "20220421"],
                  "validation": ["20220419", "20220421"], "test": ["20220422", "20220508"]},
    }
    ds = load_csv(p, spec)
    out = subprocess.run(
        ["awk", "-F,", 'NR > 1 && $3 <= "20220421" {c[$19]++} END {for (k in c) print k, c[k]}', str(p)],
        capture_output=True, text=True, check=True,
    ).stdout
    shell = {k: int(v) for k, v in (line.split() for line in out.strip().splitlines())}
    assert ds.counts()["train"] == [shell.get(t, 0) for t in ["0", "1", "2", "4", "5", "6"]]


# ------------------------------------------------------------------ split_by_key


def test_single_user_lands_in_one_split():
    rows = [{"user": "u", "i": str(i)} for i in range(50)]
    parts = split_by_key(rows, "user", seed=3)
    assert sorted(len(p) for p in parts) == [0, 0, 50]


def test_split_masses_near_ratio():
    rows = [{"user": str(u)} for u in range(10_000)]
    parts = split_by_key(rows, "user", seed=0)
    fracs = [len(p) / 10_000 for p in parts]
    assert abs(fracs[0] - 0.8) < 0.02 and abs(fracs[1] - 0.1) < 0.02 and abs(fracs[2] - 0.1) < 0.02


def test_split_deterministic_and_atomic():
    rng = np.random.default_rng(1)
    rows = [{"user": str(rng.integers(300)), "n": str(i)} for i in range(3000)]
    a = split_by_key(rows, "user", seed=7)
    b = split_by_key(rows, "user", seed=7)
    assert a == b
    owners = [{r["user"] for r in part} for part in a]
    assert not (owners[0] & owners[1]) and not (owners[0] & owners[2]) and not (owners[1] & owners[2])


def test_split_empty_rejected():
    with pytest.raises(ValueError):
        split_by_key([], "user")


def test_key_split_rule_in_csv(tmp_path):
    rows = [[f"u{i % 40}", f"i{i}", str(i % 2), str(i % 3 == 0)[0] == "T" and "1" or "0"] for i in range(400)]
    p = write_rows(tmp_path / "a.csv", ["user", "item", "tab", "click"], rows)
    ds = load_csv(p, {**SPEC, "split": {"type": "key", "key": "user", "seed": 1}})
    assert sum(sum(c) for c in ds.counts().values()) == 400


# ------------------------------------------------------------------- generator


def test_generator_hits_ctr_targets():
    ds = gen_synthetic(num_domains=2, target_ctrs=[0.02, 0.08], train_samples=40_000, seed=3)
    for got, want in zip(ds.ctr("train"), [0.02, 0.08]):
        assert abs(got - want) <= 0.005


def test_generator_deterministic_bytes(tmp_path):
    a = write_csv(gen_synthetic(train_samples=3000, seed=5), tmp_path / "a.csv").read_bytes()
    b = write_csv(gen_synthetic(train_samples=3000, seed=5), tmp_path / "b.csv").read_bytes()
    c = write_csv(gen_synthetic(train_samples=3000, seed=6), tmp_path / "c.csv").read_bytes()
    assert a == b and a != c


def test_signal_strength_controls_label_functions():
    same = np.array(gen_synthetic(train_samples=1000, signal_strength=0.0).meta["domain_weights"])
    assert np.allclose(same, same[0], rtol=0, atol=1e-12)
    distinct = np.array(gen_synthetic(train_samples=1000, signal_strength=1.0).meta["domain_weights"])
    cos = distinct @ distinct.T / np.outer(np.linalg.norm(distinct, axis=1), np.linalg.norm(distinct, axis=1))
    assert np.all(np.abs(cos[~np.eye(len(cos), dtype=bool)]) < 0.999)


def test_domain_groups_share_label_function():
    ds = gen_synthetic(train_samples=1000, num_domains=4, domain_groups=[0, 0, 1, 1], signal_strength=1.0)
    w = np.array(ds.meta["domain_weights"])
    assert np.array_equal(w[0], w[1]) and np.array_equal(w[2], w[3]) and not np.array_equal(w[0], w[2])


def test_unreachable_ctr_raises():
    # three rows can only realize rates in thirds
    with pytest.raises(GenerationError, match="unreachable"):
        _calibrate_bias(np.zeros(3), np.array([0.1, 0.5, 0.9]), 0.5)


def test_synthetic_csv_round_trip(tmp_path):
    ds = gen_synthetic(train_samples=2000, seed=1)
    p = write_csv(ds, tmp_path / "syn.csv")
    back = load_csv(p, csv_schema_for(ds))
    assert back.counts() == ds.counts()
    for d in range(1, ds.num_domains + 1):
        assert np.array_equal(back.split("train", d).labels, ds.split("train", d).labels)


# --------------------------------------------------------------------- batching


def test_cycling_wraps_into_next_pass():
    it = BatchIterator(5, 2, np.random.default_rng(0))
    draws = [it.next_indices() for _ in range(3)]
    first_pass = np.concatenate(draws)[:5]
    assert sorted(first_pass.tolist()) == [0, 1, 2, 3, 4]
    assert it.passes == 2 and all(len(d) == 2 for d in draws)


def test_batches_deterministic():
    seqs = []
    for _ in range(2):
        it = BatchIterator(37, 8, np.random.default_rng(11))
        seqs.append([it.next_indices().tolist() for _ in range(20)])
    assert seqs[0] == seqs[1]


def test_every_sample_once_per_pass():
    it = BatchIterator(10_000, 512, np.random.default_rng(2))
    seen = np.concatenate([it.next_indices() for _ in range(40)])  # 20480 = two full passes + 480
    for k in range(2):
        assert Counter(seen[k * 10_000:(k + 1) * 10_000].tolist()) == Counter(range(10_000))


def test_nonpositive_batch_size():
    with pytest.raises(ValueError):
        BatchIterator(5, 0, np.random.default_rng(0))


def test_domain_batcher_independent_streams():
    ds = gen_synthetic(train_samples=3000, seed=2)
    a = DomainBatcher(ds, 64, seed=4)
    b = DomainBatcher(ds, 64, seed=4)
    b.next_batch(2)  # advancing domain 2 must not shift domain 1
    assert np.array_equal(a.next_batch(1).indices, b.next_batch(1).indices)
    batch = a.next_batch(3)
    assert batch.domain == 3 and batch.features.shape == (64, ds.num_fields)


def test_schema_rejects_unknown_keys():
    from dfei.errors import ConfigError
    with pytest.raises(ConfigError):
        SchemaSpec.from_dict({**SPEC, "colour": "red"})


@pytest.mark.parametrize("seed", range(3))
def test_probe_trained_elsewhere_ranks_worse(seed):
    from dfei.data import DomainDataset
    from dfei.metrics import auc
    from dfei.model import ModelConfig, build_model
    from dfei.train import TrainConfig, fit

    ds = gen_synthetic(num_domains=2, num_users=600, num_items=300, train_samples=24_000,
                       target_ctrs=[0.1, 0.1], signal_strength=0.7, seed=seed)

    def probe(d):
        single = DomainDataset(ds.vocab_sizes, {s: [ds.split(s, d)] for s in ("train", "validation", "test")})
        model = build_model(ModelConfig(1, ds.vocab_sizes, embed_dim=8, tower_dims=[32, 16], dropout_rates=[0, 0],
                                        head_dims=[16]), seed, "mlp")
        fit(model, single, TrainConfig(batch_size=256, lr=3e-3, epochs=6, patience=2, seed=seed))
        return model

    target = ds.split("test", 2)
    home = auc(probe(2).predict(target.features, 1), target.labels)
    away = auc(probe(1).predict(target.features, 1), target.labels)
    assert away < home
