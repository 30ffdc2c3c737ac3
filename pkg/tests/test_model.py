import dataclasses
import json
import math

import numpy as np
import pytest

from m3cap import autodiff as ad
from m3cap import model as m
from m3cap.attention import FeatureSequence
from m3cap.autodiff import Tape, Tensor
from m3cap.cli import gradcheck_instance
from m3cap.dataio import SyntheticSpec, build_vocab, gen_synthetic
from m3cap.decoder import DecoderState, Vocabulary
from m3cap.optim import AdadeltaState, adadelta_update, clip_gradients
from m3cap.params import ParameterStore

import oracles

MICRO = m.ModelConfig.micro()


def random_state(cfg, rng):
    mem = rng.normal(size=(cfg.memory_rows, cfg.memory_cols)) * rng.uniform(1e-3, 1)
    dec = DecoderState(Tensor(rng.uniform(-1, 1, cfg.hidden)), Tensor(rng.normal(size=cfg.hidden)))
    return m.StepState(Tensor(mem), dec, int(rng.integers(0, 12)))


def test_episode_start_is_zero_state():
    s = m.episode_start(MICRO)
    assert np.array_equal(s.decoder.h.data, np.zeros(8))
    assert np.array_equal(s.decoder.c.data, np.zeros(8))
    assert s.prev == m.BOS
    assert s.memory.shape == (4, 8) and np.all(np.abs(s.memory.data) <= 2e-6)


@pytest.mark.parametrize("seed", range(10))
def test_step_matches_straight_line_oracle(seed):
    store, feats, _ = gradcheck_instance(MICRO, seed)
    rng = np.random.default_rng(seed)
    state = random_state(MICRO, rng)
    new, rho = m.m3_step(state, feats, store)
    P = store.arrays()
    mem, h, c, rho_ref = oracles.step(P, state.memory.data, state.decoder.h.data, state.decoder.c.data,
                                      state.prev, feats.features, feats.mask)
    for got, want in ((rho.data, rho_ref), (new.memory.data, mem), (new.decoder.h.data, h),
                      (new.decoder.c.data, c)):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_step_is_deterministic():
    store, feats, _ = gradcheck_instance(MICRO, 3)
    a = m.m3_step(m.episode_start(MICRO), feats, store)[1].data
    b = m.m3_step(m.episode_start(MICRO), feats, store)[1].data
    assert a.tobytes() == b.tobytes()


def test_silent_heads_leave_memory_untouched():
    # erase gates at sigmoid(-inf) = 0 and add vectors at tanh(0) = 0
    store, feats, _ = gradcheck_instance(MICRO, 4)
    for head in ("head.tw", "head.vw"):
        store[f"{head}.erase.W"].data = np.zeros_like(store[f"{head}.erase.W"].data)
        store[f"{head}.erase.b"].data = np.full(8, -1e4)
        store[f"{head}.add.W"].data = np.zeros_like(store[f"{head}.add.W"].data)
        store[f"{head}.add.b"].data = np.zeros(8)
    state = random_state(MICRO, np.random.default_rng(4))
    new, _ = m.m3_step(state, feats, store)
    assert new.memory.data.tobytes() == state.memory.data.tobytes()


def test_step_trace_records_every_phase():
    store, feats, _ = gradcheck_instance(MICRO, 5)
    trace = {}
    m.step_logits(m.episode_start(MICRO), feats, store, trace=trace)
    assert set(trace) == {"w_tw", "w_vr", "r_vr", "alpha", "context", "w_vw", "w_tr", "r_tr"}
    assert trace["alpha"].shape == (3,)


def zero_model(n_tokens=10, **kw):
    cfg = m.ModelConfig.micro(**kw)
    vocab = Vocabulary([f"w{i}" for i in range(n_tokens)])
    model = m.Model(cfg, vocab)
    model.store.assign({n: np.zeros(p.shape) for n, p in model.store.items()})
    return model


def test_zero_params_loss_is_log_of_emittable_ids():
    model = zero_model()
    feats = FeatureSequence(np.random.default_rng(0).normal(size=(2, 6)))
    loss = m.sequence_loss(feats, [4, 9, 2], None, model.store, model.config).item()
    assert loss == pytest.approx(math.log(12), abs=1e-12)


def test_l2_is_additive():
    store, feats, caption = gradcheck_instance(MICRO, 6)
    l0 = m.sequence_loss(feats, caption, None, store, MICRO, l2=0.0).item()
    l1 = m.sequence_loss(feats, caption, None, store, MICRO, l2=1.0).item()
    assert l1 - l0 == pytest.approx(store.sq_norm(), rel=1e-12)


def test_l2_gradient_is_two_lambda_theta():
    store, feats, caption = gradcheck_instance(MICRO, 7)

    def grads(l2):
        with Tape() as tape:
            return ad.backward(m.sequence_loss(feats, caption, None, store, MICRO, l2=l2), store, tape)

    g0, g1 = grads(0.0), grads(0.01)
    for name, p in store.items():
        np.testing.assert_allclose(g1[name] - g0[name], 0.02 * p.data, rtol=0, atol=1e-12)


def test_loss_matches_oracle():
    store, feats, caption = gradcheck_instance(MICRO, 8)
    mem0 = m.episode_start(MICRO).memory.data
    got = m.sequence_loss(feats, caption, None, store, MICRO, l2=1e-3).item()
    want = oracles.caption_loss(store.arrays(), mem0, feats.features, feats.mask, caption, 1e-3)
    assert got == pytest.approx(want, abs=1e-10)


def test_masked_positions_do_not_count():
    store, feats, caption = gradcheck_instance(MICRO, 9)
    full = m.caption_nll(feats, caption + [0, 0], [1, 1, 1, 0, 0], store, MICRO).item()
    assert full == pytest.approx(m.caption_nll(feats, caption, None, store, MICRO).item(), abs=1e-14)
    with pytest.raises(ValueError):
        m.caption_nll(feats, caption, [0, 0, 0], store, MICRO)


def test_batch_loss_is_mean_plus_shared_l2():
    cfg = dataclasses.replace(MICRO, l2=1e-2)
    store, f1, c1 = gradcheck_instance(cfg, 10)
    _, f2, c2 = gradcheck_instance(cfg, 11)
    got = m.batch_loss([(f1, c1), (f2, c2)], store, cfg).item()
    parts = [m.caption_nll(f, c, None, store, cfg).item() for f, c in ((f1, c1), (f2, c2))]
    assert got == pytest.approx(sum(parts) / 2 + 1e-2 * store.sq_norm(), abs=1e-13)


@pytest.mark.parametrize("g, want", [(15.0, 10.0), (-3.0, -3.0), (-12.5, -10.0)])
def test_clip_examples(g, want):
    assert clip_gradients({"x": np.array([g])}, 10.0)["x"][0] == want


def test_clip_rejects_bad_bound():
    with pytest.raises(ValueError):
        clip_gradients({"x": np.ones(1)}, 0.0)


def one_param_store(values):
    store = ParameterStore()
    store.add("x", np.asarray(values, dtype=float))
    return store


def test_adadelta_zero_gradient_is_no_update():
    store = one_param_store([0.3, -1.0])
    state = AdadeltaState.fresh(store)
    delta = adadelta_update(store, {"x": np.zeros(2)}, state)
    assert np.array_equal(delta["x"], np.zeros(2))
    assert store["x"].data.tolist() == [0.3, -1.0]


def test_adadelta_first_step_formula():
    g = np.array([2.0, -0.5, 1e-4])
    store = one_param_store(np.zeros(3))
    delta = adadelta_update(store, {"x": g}, AdadeltaState.fresh(store))["x"]
    np.testing.assert_allclose(delta, -g * math.sqrt(1e-6) / np.sqrt(0.05 * g * g + 1e-6), rtol=1e-14)


def test_adadelta_step_bounded_by_previous_update_rms():
    # |delta_t| <= sqrt(E[delta^2]_{t-1} + eps) / sqrt(1 - rho) for any gradient
    rng = np.random.default_rng(0)
    store = one_param_store(np.zeros(50))
    state = AdadeltaState.fresh(store)
    for _ in range(200):
        g = rng.normal(size=50) * 10.0 ** rng.uniform(-6, 3, 50)
        bound = np.sqrt(state.sq_delta["x"] + state.eps) / math.sqrt(1 - state.decay)
        delta = adadelta_update(store, {"x": g}, state)["x"]
        assert np.all(np.abs(delta) <= bound * (1 + 1e-12))


def test_adadelta_state_round_trip():
    store = one_param_store([1.0, 2.0])
    state = AdadeltaState.fresh(store)
    adadelta_update(store, {"x": np.array([0.5, -0.1])}, state)
    back = AdadeltaState.from_arrays(state.to_arrays())
    assert np.array_equal(back.sq_grad["x"], state.sq_grad["x"])
    assert np.array_equal(back.sq_delta["x"], state.sq_delta["x"])


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(m.ConfigError, match="bogus"):
        m.ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(m.ConfigError):
        m.ModelConfig(hidden=0)
    with pytest.raises(m.ConfigError):
        m.ModelConfig(dropout=1.0)
    assert m.ModelConfig.from_dict(MICRO.to_dict()) == MICRO


def test_dropout_masks_are_inverted_and_seeded():
    cfg = m.ModelConfig.micro(dropout=0.5, hidden=1000)
    a = m.dropout_masks(cfg, np.random.default_rng(1))
    b = m.dropout_masks(cfg, np.random.default_rng(1))
    assert set(np.unique(a["h_mask"])) <= {0.0, 2.0}
    assert np.array_equal(a["z_mask"], b["z_mask"])
    assert m.dropout_masks(cfg, None) == {}


def tiny_task(n_samples=16):
    task = gen_synthetic(SyntheticSpec(seed=1, n_samples=n_samples, frames=2, width=6))
    cfg = m.ModelConfig.micro(memory_rows=4, memory_cols=6, hidden=8, embed=6, attention=6,
                              vocab_cap=50, batch_size=4, epochs=2, dropout=0.5)
    vocab = build_vocab(task.datasets["train"].captions(), cfg.vocab_cap)
    pairs = m.encode_pairs(task.datasets["train"], vocab, cfg.max_caption_len)
    return cfg, vocab, pairs


def test_zero_gradient_training_keeps_initialization(tmp_path):
    cfg, vocab, pairs = tiny_task()
    cfg = dataclasses.replace(cfg, epochs=1, batch_size=1)
    model = m.Model(cfg, vocab)
    init = model.store.copy()
    m.train(model, pairs[:1], [], tmp_path / "ck", grad_hook=lambda g: {k: np.zeros_like(v) for k, v in g.items()})
    for path in (tmp_path / "ck", tmp_path / "ck.last"):
        loaded, _, _ = m.Model.load(path)
        for name, p in init.items():
            assert loaded.store[name].data.tobytes() == p.data.tobytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg, vocab, pairs = tiny_task()
    for sub in "ab":
        (tmp_path / sub).mkdir()
    m.train(m.Model(cfg, vocab), pairs, pairs[:4], tmp_path / "a" / "ck", tmp_path / "a.jsonl")
    first = m.Model(dataclasses.replace(cfg, epochs=1), vocab)
    m.train(first, pairs, pairs[:4], tmp_path / "b" / "ck", tmp_path / "b.jsonl")
    resumed = m.Model(cfg, vocab)
    m.train(resumed, pairs, pairs[:4], tmp_path / "b" / "ck", tmp_path / "b.jsonl",
            resume_from=tmp_path / "b" / "ck.last")
    assert (tmp_path / "a" / "ck.last").read_bytes() == (tmp_path / "b" / "ck.last").read_bytes()
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_batch_id(tmp_path):
    cfg, vocab, pairs = tiny_task()
    model = m.Model(cfg, vocab)
    model.store["out.b"].data[4] = np.inf
    with pytest.raises(m.NonFiniteLossError) as err:
        m.train(model, pairs, [], tmp_path / "ck")
    assert err.value.epoch == 1 and err.value.batch == 0


def test_checkpoint_shape_mismatch_is_reported(tmp_path):
    cfg, vocab, _ = tiny_task()
    model = m.Model(cfg, vocab)
    model.save(tmp_path / "ck")
    header_cfg = dataclasses.replace(cfg, hidden=9)
    other = m.Model(header_cfg, vocab)
    other.store.save(tmp_path / "bad", meta={"config": cfg.to_dict(), "vocab": vocab.tokens[4:]})
    with pytest.raises(m.ConfigError, match="lstm.U: config expects"):
        m.Model.load(tmp_path / "bad")
    assert m.Model.load(tmp_path / "ck")[0].vocab == vocab


def test_log_lines_have_documented_fields(tmp_path):
    cfg, vocab, pairs = tiny_task()
    m.train(m.Model(dataclasses.replace(cfg, epochs=1), vocab), pairs, pairs[:2], tmp_path / "ck",
            tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [(r["epoch"], r["split"]) for r in rows] == [(0, "train"), (0, "val"), (1, "train"), (1, "val")]
    assert set(rows[0]) == {"epoch", "split", "loss", "tokens", "accuracy"}


@pytest.mark.slow
def test_toy_training_loss_decreases_over_first_epochs(tmp_path):
    task = gen_synthetic(SyntheticSpec(seed=0, n_samples=72))
    cfg = m.ModelConfig.toy(epochs=5)
    vocab = build_vocab(task.datasets["train"].captions(), cfg.vocab_cap)
    pairs = m.encode_pairs(task.datasets["train"], vocab, cfg.max_caption_len)
    result = m.train(m.Model(cfg, vocab), pairs, [], tmp_path / "ck")
    losses = [r["loss"] for r in result.history]
    assert len(losses) == 6
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_trained_embeddings_separate_frequent_tokens(tmp_path):
    cfg, vocab, pairs = tiny_task()
    model = m.Model(cfg, vocab)
    m.train(model, pairs, [], tmp_path / "ck")
    a, b = vocab.encode(["a", "is"])
    assert not np.array_equal(model.store["embed"].data[a], model.store["embed"].data[b])
