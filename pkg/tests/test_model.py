import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfei.errors import DataError, StateError
from dfei.model import DfeiModel, DomainFeatureBank, ModelConfig, SharedMLPModel, build_model, dfe_update
from dfei.numcore import autograd as ag
from dfei.numcore import Adam, Tensor, compute_gradients
from dfei.train import cross_entropy_loss, train_step
from dfei.data import Batch

from helpers import central_fd, max_rel_err


def small_config(D=3, **kw):
    base = dict(num_domains=D, vocab_sizes=[5, 6, 4, 3], embed_dim=4, tower_dims=[8, 6, 4],
                dropout_rates=[0.1, 0.2, 0.3], attention_dim=4, head_dims=[8, 6])
    base.update(kw)
    return ModelConfig(**base)


def random_ids(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.integers(0, v + 1, size=n) for v in cfg.vocab_sizes])


def warm(model, seed=0):
    rng = np.random.default_rng(seed)
    for d in range(1, model.config.num_domains + 1):
        model.bank.update(d, rng.random((5, model.config.feature_dim)))
    return model


# ------------------------------------------------------------------- embed


@pytest.mark.parametrize("F", [1, 3])
def test_embedding_width(F):
    cfg = ModelConfig(num_domains=2, vocab_sizes=[4] * F)
    model = DfeiModel(cfg, seed=0)
    assert model.embed(np.zeros((2, F), dtype=int)).shape == (2, 16 * F)


def test_zeroed_row_gives_zero_slice():
    cfg = small_config()
    model = DfeiModel(cfg)
    model.embedding[1].data[2] = 0.0
    ids = random_ids(cfg, 6)
    ids[:, 1] = 2
    e = model.embed(ids).data
    assert np.array_equal(e[:, 4:8], np.zeros((6, 4)))


def test_oov_bucket_allowed_and_beyond_rejected():
    cfg = small_config()
    model = DfeiModel(cfg)
    ids = np.array([[5, 6, 4, 3]])  # every field at its OOV id
    assert model.embed(ids).shape == (1, 16)
    bad = np.array([[0, 0, 0, 0], [0, 7, 0, 0]])
    with pytest.raises(DataError, match="field 1 at row 1"):
        model.embed(bad)


def test_shared_id_gradient_accumulates():
    cfg = small_config()
    model = DfeiModel(cfg)
    ids = np.array([[1, 2, 3, 0], [1, 4, 0, 2]])  # field 0 id 1 used by both rows
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(2, 16)))
    table = model.embedding[0]

    def loss():
        return ag.sum_all(ag.mul(model.embed(ids), w))

    g = compute_gradients(loss(), {"t": table})["t"]
    assert np.allclose(g[1], w.data[0, :4] + w.data[1, :4], rtol=0, atol=1e-15)
    (n,) = central_fd(lambda: float(loss().data), [table.data])
    assert max_rel_err(g, n) < 1e-4


def test_same_id_same_vector_across_domains():
    cfg = small_config()
    model = warm(DfeiModel(cfg))
    ids = random_ids(cfg, 4)
    assert np.array_equal(model.embed(ids).data, model.embed(ids.copy()).data)
    # embedding is one shared group, never domain-tagged
    groups = model.group_of()
    assert all(groups[f"embedding.{f}"] == "shared" for f in range(cfg.num_fields))


# ------------------------------------------------------------------- towers


def test_shared_tower_identical_across_domains_specific_diverges_after_training():
    cfg = small_config()
    model = warm(DfeiModel(cfg, seed=4))
    e = model.embed(random_ids(cfg, 5))
    s1, u1 = model.towers_forward(e, 1)
    s2, u2 = model.towers_forward(e, 2)
    assert np.array_equal(s1.data, s2.data)
    ids = random_ids(cfg, 16, seed=9)
    batch = Batch(1, ids, np.arange(16) % 2)
    opt = Adam()
    for _ in range(3):
        train_step(model, opt, 1, batch, lr=0.05)
    e = model.embed(random_ids(cfg, 5))
    _, u1 = model.towers_forward(e, 1)
    _, u2 = model.towers_forward(e, 2)
    assert not np.array_equal(u1.data, u2.data)


def test_zero_tower_weights_give_relu_bias_chain():
    cfg = small_config()
    model = DfeiModel(cfg)
    rng = np.random.default_rng(0)
    for tower in [model.shared_tower, model.towers[0]]:
        for layer in tower.layers:
            layer.W.data[...] = 0.0
            layer.b.data[...] = rng.normal(size=layer.b.shape)
    e = model.embed(random_ids(cfg, 3))
    s, u = model.towers_forward(e, 1)
    for out, tower in [(s, model.shared_tower), (u, model.towers[0])]:
        expected = np.maximum(tower.layers[-1].b.data, 0.0)
        assert np.array_equal(out.data, np.tile(expected, (3, 1)))


def test_unknown_domain_rejected():
    model = DfeiModel(small_config())
    e = model.embed(random_ids(model.config, 2))
    with pytest.raises(ValueError):
        model.towers_forward(e, 4)
    with pytest.raises(ValueError):
        model.towers_forward(e, 0)


def test_domain_tower_gradient_isolated():
    cfg = small_config()
    model = DfeiModel(cfg)
    e = model.embed(random_ids(cfg, 5))
    _, u = model.towers_forward(e, 2)
    grads = compute_gradients(ag.mean(u), model.params)
    groups = model.group_of()
    for name, g in grads.items():
        if name.startswith("tower.2.") or name.startswith("embedding."):
            continue
        assert not g.any(), name
    assert any(grads[n].any() for n in grads if n.startswith("tower.2."))


# --------------------------------------------------------------- dfe_update


def test_dfe_base_case_is_batch_mean():
    bank = DomainFeatureBank(2, 2, 0.9)
    out = dfe_update(bank, 1, np.array([[1.0, 3.0], [3.0, 1.0]]))
    assert out.tolist() == [2.0, 2.0]
    assert bank.steps.tolist() == [1, 0]


def test_dfe_ema_substitution():
    bank = DomainFeatureBank(1, 2, 0.9)
    bank.update(1, np.ones((1, 2)))
    out = bank.update(1, np.zeros((3, 2)))
    assert np.allclose(out, [0.9, 0.9], rtol=0, atol=1e-15)


def test_dfe_alpha_boundaries():
    frozen = DomainFeatureBank(1, 2, 1.0)
    frozen.update(1, np.array([[1.0, 2.0]]))
    frozen.update(1, np.array([[7.0, -3.0]]))
    assert frozen.vector(1).tolist() == [1.0, 2.0]
    latest = DomainFeatureBank(1, 2, 0.0)
    latest.update(1, np.array([[1.0, 2.0]]))
    latest.update(1, np.array([[7.0, -3.0], [1.0, 1.0]]))
    assert latest.vector(1).tolist() == [4.0, -1.0]


def test_dfe_empty_batch_rejected():
    with pytest.raises(ValueError):
        DomainFeatureBank(1, 2, 0.5).update(1, np.zeros((0, 2)))


@settings(max_examples=50, deadline=None)
@given(
    alpha=st.floats(0.0, 1.0),
    batches=st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3), min_size=1, max_size=20),
)
def test_dfe_stays_within_observed_pooled_range(alpha, batches):
    bank = DomainFeatureBank(1, 3, alpha)
    pooled = []
    rng = np.random.default_rng(len(batches))
    for centre in batches:
        u = np.asarray(centre) + rng.normal(size=(4, 3))
        pooled.append(u.mean(axis=0))
        v = bank.update(1, u)
        lo, hi = np.min(pooled, axis=0), np.max(pooled, axis=0)
        assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)


# -------------------------------------------------------------- dfi_integrate


def test_dfi_single_domain():
    cfg = small_config(D=1)
    model = warm(DfeiModel(cfg))
    e = model.embed(random_ids(cfg, 4))
    z, w = model.dfi_integrate(e)
    assert np.array_equal(w.data, np.ones((4, 1)))
    expected = model.bank.vectors[0] @ model.h1.W.data + model.h1.b.data
    assert np.allclose(z.data, np.tile(expected, (4, 1)), rtol=0, atol=1e-15)


def test_dfi_zero_query_gives_uniform_weights():
    cfg = small_config(D=3)
    model = warm(DfeiModel(cfg))
    model.h2.W.data[...] = 0.0
    model.h2.b.data[...] = 0.0
    _, w = model.dfi_integrate(model.embed(random_ids(cfg, 5)))
    assert np.allclose(w.data, 1 / 3, rtol=0, atol=1e-15)


def test_dfi_matches_hand_oracle():
    cfg = ModelConfig(num_domains=3, vocab_sizes=[2], embed_dim=2, tower_dims=[2], dropout_rates=[0.0],
                      attention_dim=2, head_dims=[2])
    model = DfeiModel(cfg)
    model.bank.vectors[...] = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]
    model.bank.initialized[...] = True
    model.h1.W.data[...] = [[1.0, 2.0], [0.0, -1.0]]
    model.h1.b.data[...] = [0.1, 0.0]
    model.h2.W.data[...] = [[0.5, 0.0], [1.0, 1.0]]
    model.h2.b.data[...] = [0.0, -0.2]
    model.h3.W.data[...] = [[2.0, 0.0], [0.0, 3.0]]
    model.h3.b.data[...] = [0.0, 0.0]
    e = Tensor([[1.0, 2.0]])
    z, w = model.dfi_integrate(e)
    # hand evaluation
    q = [1.0 * 0.5 + 2.0 * 1.0, 0.0 * 1.0 + 2.0 * 1.0 - 0.2]  # [2.5, 1.8]
    keys = [[2.0, 0.0], [0.0, 3.0], [1.0, 1.5]]
    vals = [[1.1, 2.0], [0.1, -1.0], [0.6, 0.5]]
    logits = [(q[0] * k[0] + q[1] * k[1]) / math.sqrt(2) for k in keys]
    ex = [math.exp(x) for x in logits]
    weights = [x / sum(ex) for x in ex]
    expected = [sum(weights[j] * vals[j][c] for j in range(3)) for c in range(2)]
    assert np.max(np.abs(w.data[0] - weights)) < 1e-12
    assert np.max(np.abs(z.data[0] - expected)) < 1e-12


def test_dfi_uninitialized_bank_names_domain():
    model = DfeiModel(small_config())
    model.bank.update(1, np.ones((2, 4)))
    with pytest.raises(StateError, match="domain 2"):
        model.dfi_integrate(model.embed(random_ids(model.config, 2)))


def test_attention_rows_normalised_and_shift_invariant():
    cfg = small_config(D=4)
    model = warm(DfeiModel(cfg, seed=2))
    e = model.embed(random_ids(cfg, 8))
    _, w = model.dfi_integrate(e)
    assert np.max(np.abs(w.data.sum(axis=1) - 1)) < 1e-9
    # a constant added to every key logit of a row leaves the weights unchanged
    logits = (model.h2(e).data @ model.h3(Tensor(model.bank.vectors)).data.T) / math.sqrt(cfg.attention_dim)
    shifted = ag.softmax(Tensor(logits + np.arange(8)[:, None] * 3.7), axis=1).data
    assert np.max(np.abs(shifted - w.data)) < 1e-12


# ------------------------------------------------------------------- predict


def test_zero_head_predicts_half():
    cfg = small_config()
    model = warm(DfeiModel(cfg))
    hidden, out = model.heads[1]
    for layer in hidden.layers + [out]:
        layer.W.data[...] = 0.0
        layer.b.data[...] = 0.0
    p = model.predict(random_ids(cfg, 7), 2)
    assert np.array_equal(p, np.full(7, 0.5))


def test_eval_predictions_bit_identical():
    cfg = small_config()
    model = warm(DfeiModel(cfg))
    ids = random_ids(cfg, 9)
    assert np.array_equal(model.predict(ids, 3), model.predict(ids, 3))


def test_predict_matches_step_by_step_composition():
    cfg = small_config()
    model = warm(DfeiModel(cfg, seed=5))
    ids = random_ids(cfg, 4, seed=8)
    d = 2
    e = model.embed(ids).data
    relu = lambda x: np.maximum(x, 0)

    def mlp(x, spec):
        for layer in spec.layers:
            x = relu(x @ layer.W.data + layer.b.data)
        return x

    s = mlp(e, model.shared_tower)
    u = mlp(e, model.towers[d - 1])
    V = model.bank.vectors
    q = e @ model.h2.W.data + model.h2.b.data
    K = V @ model.h3.W.data + model.h3.b.data
    Vals = V @ model.h1.W.data + model.h1.b.data
    logits = q @ K.T / math.sqrt(cfg.attention_dim)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    z = w @ Vals
    h = np.concatenate([s, u, np.tile(V[d - 1], (4, 1)), z], axis=1)
    hidden, out = model.heads[d - 1]
    logit = (mlp(h, hidden) @ out.W.data + out.b.data)[:, 0]
    expected = 1 / (1 + np.exp(-logit))
    assert np.max(np.abs(model.predict(ids, d) - expected)) < 1e-12
    assert np.all((expected > 0) & (expected < 1))


def test_eval_predict_mutates_nothing():
    cfg = small_config()
    model = warm(DfeiModel(cfg))
    opt = Adam()
    batch = Batch(1, random_ids(cfg, 8), np.arange(8) % 2)
    train_step(model, opt, 1, batch)
    before_params = {n: t.data.copy() for n, t in model.params.items()}
    before_bank = model.bank.copy()
    before_rng = model.rng.bit_generator.state
    before_opt = {n: (s.m.copy(), s.v.copy(), s.t) for n, s in opt.states.items()}
    model.predict(random_ids(cfg, 20), 1)
    assert all(np.array_equal(before_params[n], t.data) for n, t in model.params.items())
    assert np.array_equal(before_bank.vectors, model.bank.vectors)
    assert np.array_equal(before_bank.steps, model.bank.steps)
    assert model.rng.bit_generator.state == before_rng
    for n, s in opt.states.items():
        m, v, t = before_opt[n]
        assert np.array_equal(m, s.m) and np.array_equal(v, s.v) and t == s.t


# -------------------------------------------------------------------- variants


def test_no_dfei_has_no_bank_and_no_projections():
    model = DfeiModel(small_config(), mode="no_dfei")
    assert model.bank is None
    assert not any(n.startswith(("h1", "h2", "h3")) for n in model.params)


def test_head_widths_with_default_dims():
    cfg = ModelConfig(num_domains=2, vocab_sizes=[3, 3])
    assert DfeiModel(cfg, mode="no_dfi").head_input_dim == 96
    assert DfeiModel(cfg, mode="full").head_input_dim == 96 + 32
    assert DfeiModel(cfg, mode="no_dfei").head_input_dim == 64


def test_no_dfi_still_updates_bank():
    cfg = small_config()
    model = warm(DfeiModel(cfg, mode="no_dfi"))
    steps = model.bank.steps.copy()
    train_step(model, Adam(), 2, Batch(2, random_ids(cfg, 6), np.arange(6) % 2))
    assert model.bank.steps[1] == steps[1] + 1


def test_mode_fixed_after_construction():
    model = DfeiModel(small_config())
    with pytest.raises(StateError):
        model.mode = "no_dfi"


def test_mlp_baseline_is_all_shared():
    model = build_model(small_config(), 0, "mlp")
    assert isinstance(model, SharedMLPModel)
    assert set(model.group_of().values()) == {"shared"}
    assert model.bank is None


# ------------------------------------------------------------------ properties


def test_partition_isolation():
    cfg = small_config(D=3)
    model = warm(DfeiModel(cfg, seed=1))
    ids = random_ids(cfg, 6)
    loss = cross_entropy_loss(model.forward(ids, 1, training=True).prob, np.arange(6) % 2)
    grads = compute_gradients(loss, model.params)
    for name, g in grads.items():
        if name.startswith(("tower.2", "tower.3", "head.2", "head.3")):
            assert not g.any(), name


def test_partition_is_disjoint_and_exhaustive():
    model = DfeiModel(small_config(D=3))
    seen = {}
    for g in model.param_groups():
        for name in g.tensors:
            assert name not in seen
            seen[name] = g.group
    assert set(seen) == set(model.params)
    assert set(seen.values()) == {"shared", "domain:1", "domain:2", "domain:3"}
    shared = {n for n, g in seen.items() if g == "shared"}
    prefixes = {n.split(".")[0] for n in shared}
    assert prefixes == {"embedding", "shared_tower", "h1", "h2", "h3"}


def test_bank_detached_but_influential():
    cfg = small_config()
    model = warm(DfeiModel(cfg, seed=3))
    ids = random_ids(cfg, 6)
    y = np.arange(6) % 2

    def loss_value():
        return float(cross_entropy_loss(model.forward(ids, 1).prob, y).data)

    grads = compute_gradients(cross_entropy_loss(model.forward(ids, 1).prob, y), model.params)
    assert not any("bank" in n for n in grads)
    (sens,) = central_fd(loss_value, [model.bank.vectors])
    assert np.abs(sens).max() > 1e-8
