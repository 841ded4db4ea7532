import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krul.engine import (
    KVCacheLayer,
    ModelConfig,
    build_model,
    decode_step,
    greedy_generate,
    partial_prefix_recompute,
    prefill,
)
from krul.errors import ConfigError, PlanInvalidError, RestorationGapError, StateCorruptionError
from krul.plan import RestorationPlan, build_plan

from conftest import random_tokens


def test_same_seed_same_weights():
    assert build_model(ModelConfig(seed=7)).checksum() == build_model(ModelConfig(seed=7)).checksum()


def test_different_seed_different_weights():
    assert build_model(ModelConfig(seed=7)).checksum() != build_model(ModelConfig(seed=8)).checksum()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_heads=4, head_dim=8, d_model=30),
        dict(n_layers=1),
        dict(vocab_size=0),
        dict(n_heads=4, head_dim=7, d_model=28),
        dict(ir_bias=-1.0),
    ],
)
def test_bad_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_weights_are_read_only(small_model):
    with pytest.raises(ValueError):
        small_model["0.wq"][0, 0] = 1.0


def test_single_token_attention_is_one(small_model):
    _, kv, attn = prefill(small_model, [5])
    for layer in attn.prefill:
        np.testing.assert_array_equal(layer, np.ones((2, 1, 1), dtype=np.float32))
    assert all(k.span == (0, 1) for k in kv)


def test_rows_are_causal_probability_vectors(small_model):
    _, _, attn = prefill(small_model, [1, 2, 3, 4, 5, 6, 7, 8])
    for layer in attn.prefill:
        np.testing.assert_allclose(layer.sum(axis=-1), 1.0, atol=1e-6)
        assert (layer >= 0).all()
        assert np.all(np.triu(layer, k=1) == 0)


def _prefill_then_decode(model, toks, k):
    logits, kv, _ = prefill(model, toks[:k])
    for t in toks[k:]:
        logits, kv, _ = decode_step(model, kv, t)
    return logits, kv


def test_prefill_matches_prefill_plus_decode(small_model):
    toks = [3, 1, 4, 1, 5, 9, 2, 6]
    ref_logits, ref_kv, _ = prefill(small_model, toks)
    logits, kv = _prefill_then_decode(small_model, toks, 5)
    np.testing.assert_allclose(logits, ref_logits, atol=1e-5)
    for a, b in zip(kv, ref_kv):
        assert a.span == b.span
        np.testing.assert_allclose(a.keys, b.keys, atol=1e-6)
        np.testing.assert_allclose(a.values, b.values, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 24), data=st.data())
def test_prefill_decode_equivalence_any_split(small_model, n, data):
    toks = data.draw(st.lists(st.integers(0, 49), min_size=n, max_size=n))
    k = data.draw(st.integers(1, n))
    ref_logits, ref_kv, _ = prefill(small_model, toks)
    logits, kv = _prefill_then_decode(small_model, toks, k)
    np.testing.assert_allclose(logits, ref_logits, atol=1e-5)
    for a, b in zip(kv, ref_kv):
        np.testing.assert_allclose(a.keys, b.keys, atol=1e-6)
        np.testing.assert_allclose(a.values, b.values, atol=1e-6)


def test_decode_row_after_one_token(small_model):
    _, kv, _ = prefill(small_model, [7])
    _, kv2, rows = decode_step(small_model, kv, 2)
    for r in rows:
        assert r.shape == (2, 1, 2)
        np.testing.assert_allclose(r.sum(axis=-1), 1.0, atol=1e-6)
    assert all(k.span == (0, 2) for k in kv2)


def test_greedy_decode_is_deterministic(small_model):
    logits, kv, _ = prefill(small_model, [1, 2, 3])
    a, _, _ = greedy_generate(small_model, kv, logits, 4)
    b, _, _ = greedy_generate(small_model, kv, logits, 4)
    assert a == b and len(a) == 4


def test_ragged_kv_is_state_corruption(small_model):
    _, kv, _ = prefill(small_model, [1, 2, 3])
    kv[2] = kv[2].slice(0, 2)
    with pytest.raises(StateCorruptionError):
        decode_step(small_model, kv, 4)


def test_full_length_plan_equals_prefill(small_model):
    toks = list(range(12))
    _, ref, _ = prefill(small_model, toks)
    kv, hidden = partial_prefix_recompute(small_model, toks, [12] * 4)
    for a, b in zip(kv, ref):
        np.testing.assert_array_equal(a.keys, b.keys)
        np.testing.assert_array_equal(a.values, b.values)
    assert hidden.activations.shape == (12, 16) and hidden.span == (0, 12)


def test_zero_plan_yields_empty_kv(small_model):
    kv, hidden = partial_prefix_recompute(small_model, list(range(12)), RestorationPlan.uniform(12, 4, 0.0))
    assert hidden is None
    assert all(k.seq_len == 0 and k.span == (0, 0) for k in kv)


def test_ramp_plan_matches_prefill_slices(small_model):
    toks = random_tokens(np.random.default_rng(0), 20, 50)
    _, ref, _ = prefill(small_model, toks)
    plan = RestorationPlan.from_recompute(20, [20, 13, 7, 0])
    kv, _ = partial_prefix_recompute(small_model, toks, plan)
    for l, layer in enumerate(kv):
        r = plan.recompute_len[l]
        assert layer.span == (0, r)
        np.testing.assert_allclose(layer.keys, ref[l].keys[:, :r], atol=1e-6)
        np.testing.assert_allclose(layer.values, ref[l].values[:, :r], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 30), r_c=st.floats(0, 1), seed=st.integers(0, 2**16))
def test_prefix_truncation_soundness(deep_model, L, r_c, seed):
    toks = random_tokens(np.random.default_rng(seed), L, 40)
    _, ref, _ = prefill(deep_model, toks)
    plan = build_plan(L, 6, r_c)
    kv, _ = partial_prefix_recompute(deep_model, toks, plan)
    for l, layer in enumerate(kv):
        r = plan.recompute_len[l]
        np.testing.assert_allclose(layer.keys, ref[l].keys[:, :r], atol=1e-6)
        np.testing.assert_allclose(layer.values, ref[l].values[:, :r], atol=1e-6)


def test_non_monotone_plan_rejected_before_compute(small_model):
    calls = []

    class Spy(list):
        def __getitem__(self, i):
            calls.append(i)
            return super().__getitem__(i)

    with pytest.raises(PlanInvalidError):
        partial_prefix_recompute(small_model, Spy(range(10)), [4, 6, 2, 0])
    assert calls == []


def test_plan_longer_than_tokens_rejected(small_model):
    with pytest.raises(PlanInvalidError):
        partial_prefix_recompute(small_model, [1, 2, 3], [4, 2, 1, 0])


def test_restored_prefill_matches_full(small_model):
    toks = random_tokens(np.random.default_rng(1), 18, 50)
    ref_logits, ref_kv, _ = prefill(small_model, toks)
    P = 14
    plan = RestorationPlan.from_recompute(P, [10, 6, 6, 2])
    pre = [ref_kv[l].slice(plan.recompute_len[l], P) for l in range(4)]
    logits, kv, attn = prefill(small_model, toks, preloaded=pre)
    np.testing.assert_allclose(logits, ref_logits, atol=1e-5)
    assert attn.query_start == P and attn.prefill[0].shape == (2, 4, 18)
    for a, b in zip(kv, ref_kv):
        np.testing.assert_allclose(a.keys, b.keys, atol=1e-6)


def test_preloaded_gap_is_restoration_error(small_model):
    toks = list(range(10))
    _, ref_kv, _ = prefill(small_model, toks)
    # layer 1 would need hidden states that layer 0 does not produce
    pre = [ref_kv[0].slice(2, 8), ref_kv[1].slice(4, 8), ref_kv[2].slice(1, 8), ref_kv[3].slice(1, 8)]
    with pytest.raises(RestorationGapError):
        prefill(small_model, toks, preloaded=pre)
    ragged = [ref_kv[l].slice(0, 8 - (l == 2)) for l in range(4)]
    with pytest.raises(RestorationGapError):
        prefill(small_model, toks, preloaded=ragged)


def test_kv_concat_requires_contiguity():
    z = np.zeros((1, 2, 2), np.float32)
    with pytest.raises(RestorationGapError):
        KVCacheLayer.concat([KVCacheLayer(z, z, (0, 2)), KVCacheLayer(z, z, (3, 5))])
