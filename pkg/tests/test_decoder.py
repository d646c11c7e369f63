import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molgeom.decoder import (
    DecoderConfig,
    DecoderParams,
    DecoderState,
    PromptTokens,
    assemble_prefix,
    greedy_decode,
    hidden_states,
    initial_state,
    sample_decode,
    sequence_logprob,
    step,
    vocab_logits,
)
from molgeom.errors import SchemaError, ShapeError
from molgeom.numerics import softmax_last_masked

SMALL = DecoderConfig(vocab_size=6, d_h=8, layers=2, heads=2, seed=4)


def make_state(cfg=SMALL, n_v=3, prompt=(1, 2), seed=0):
    params = DecoderParams.init(cfg)
    h_fused = np.random.default_rng(seed).normal(size=(n_v, cfg.d_h))
    return initial_state(h_fused, PromptTokens(tuple(prompt), cfg.vocab_size), params), params


def stepwise_logprob(state, params, y):
    total = 0.0
    for tok in y:
        total += math.log(step(state, params)[tok])
        state = state.extend(tok, params)
    return total


def test_prompt_ids_validated():
    with pytest.raises(SchemaError):
        PromptTokens((0, 6), 6)


def test_assemble_prefix_rows_and_placement():
    params = DecoderParams.init(SMALL)
    h_fused = np.random.default_rng(1).normal(size=(5, 8))
    h_in = assemble_prefix(h_fused, PromptTokens((3, 0, 3), 6), params.txt)
    assert h_in.shape == (8, 8)
    assert np.array_equal(h_in[:5], h_fused)
    assert np.array_equal(h_in[5], params.txt[3].astype(np.float64))
    assert np.array_equal(h_in[7], h_in[5])
    assert np.array_equal(assemble_prefix(h_fused, PromptTokens((), 6), params.txt), h_fused)
    with pytest.raises(ShapeError):
        assemble_prefix(h_fused[:, :6], PromptTokens((), 6), params.txt)


def test_full_prefix_row_count():
    cfg = DecoderConfig(vocab_size=16, d_h=64, heads=4)
    params = DecoderParams.init(cfg)
    h_in = assemble_prefix(np.zeros((256, 64)), PromptTokens(tuple(range(10)), 16), params.txt)
    assert h_in.shape[0] == 266


def test_state_row_invariant():
    state, params = make_state()
    assert state.n_prompt_rows == 5 and state.prefix == ()
    grown = state.extend(4, params).extend(0, params)
    assert grown.context.shape[0] == 7 and grown.prefix == (4, 0)
    with pytest.raises(ShapeError):
        DecoderState(np.zeros((3, 8)), (1, 2), 2)
    with pytest.raises(SchemaError):
        state.extend(6, params)


def test_step_is_distribution():
    state, params = make_state()
    pi = step(state, params)
    assert pi.shape == (6,) and np.all(pi >= 0)
    assert abs(pi.sum() - 1.0) <= 1e-6


def test_zero_weights_give_uniform():
    cfg = DecoderConfig(vocab_size=4, d_h=8, heads=2)
    params = DecoderParams.zeros(cfg)
    state = initial_state(np.ones((2, 8)), PromptTokens((1,), 4), params)
    assert np.allclose(step(state, params), 0.25, atol=1e-15)
    assert sequence_logprob(state, params, [2]) == pytest.approx(math.log(0.25), abs=1e-12)
    assert sequence_logprob(state, params, []) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2**31))
def test_causality(t, seed):
    """Rows after position t do not influence the distribution read at t."""
    state, params = make_state(seed=1)
    rng = np.random.default_rng(seed)
    tail = rng.normal(size=(5, 8))
    full = np.concatenate([state.context, tail])
    cut = state.context.shape[0] + t
    pi = step(DecoderState(full[:cut]), params)
    noisy = full.copy()
    noisy[cut:] += 10 * rng.normal(size=noisy[cut:].shape)
    h = hidden_states(noisy, params)[cut - 1 : cut]
    assert np.allclose(softmax_last_masked(vocab_logits(h, params))[0], pi, atol=1e-12)


def test_factorization_exhaustive():
    state, params = make_state()
    for length in range(4):
        for y in itertools.product(range(6), repeat=length):
            direct = math.exp(sequence_logprob(state, params, y))
            product = math.exp(stepwise_logprob(state, params, y))
            assert abs(direct - product) <= 1e-9 * product, y


def test_factorization_to_length_eight():
    state, params = make_state(seed=3)
    y = list(np.random.default_rng(0).integers(0, 6, size=8))
    assert math.isclose(sequence_logprob(state, params, y), stepwise_logprob(state, params, y), rel_tol=1e-9)


def test_chain_consistency():
    state, params = make_state(seed=2)
    y = [5, 0, 3, 3]
    for t in range(1, len(y) + 1):
        s = state
        for tok in y[: t - 1]:
            s = s.extend(tok, params)
        expected = sequence_logprob(state, params, y[: t - 1]) + math.log(step(s, params)[y[t - 1]])
        assert abs(sequence_logprob(state, params, y[:t]) - expected) <= 1e-9


def test_logprob_rejects_out_of_vocab():
    state, params = make_state()
    with pytest.raises(SchemaError):
        sequence_logprob(state, params, [0, 9])


@pytest.mark.parametrize("vocab", range(2, 9))
def test_greedy_dominance_exhaustive(vocab):
    cfg = DecoderConfig(vocab_size=vocab, d_h=8, heads=2, seed=vocab)
    state, params = make_state(cfg, prompt=(0,))
    for t_max in (1, 2, 3):
        g = greedy_decode(state, params, t_max)
        assert len(g) == t_max
        base = sequence_logprob(state, params, g)
        for k in range(t_max):
            prefix = list(g[:k])
            head = sequence_logprob(state, params, prefix + [g[k]])
            for v in range(vocab):
                assert head >= sequence_logprob(state, params, prefix + [v])
        assert base == sequence_logprob(state, params, g)


def test_greedy_deterministic():
    state, params = make_state()
    runs = [greedy_decode(state, params, 6) for _ in range(5)]
    assert all(r == runs[0] for r in runs)


def test_greedy_rigged_and_ties():
    params = DecoderParams.init(SMALL)
    w = np.zeros_like(params.w_vocab)
    rigged = DecoderParams(SMALL, params.txt, params.blocks, params.lnf_g, params.lnf_b, w,
                           np.array([0.0, 0.0, 0.0, 5.0, 0.0, 0.0]))  # fmt: skip
    state = initial_state(np.ones((2, 8)), PromptTokens((), 6), rigged)
    assert greedy_decode(state, rigged, 7) == [3] * 7
    assert greedy_decode(state, rigged, 7, stop_id=3) == [3]
    tied = DecoderParams.zeros(SMALL)
    assert greedy_decode(state, tied, 3) == [0, 0, 0]
    with pytest.raises(SchemaError):
        greedy_decode(state, rigged, 0)


def _biased(probs):
    cfg = DecoderConfig(vocab_size=len(probs), d_h=8, heads=2)
    with np.errstate(divide="ignore"):
        bias = np.maximum(np.log(probs), -1e9)
    params = DecoderParams.zeros(cfg).with_vocab_bias(bias)
    return initial_state(np.ones((1, 8)), PromptTokens((), cfg.vocab_size), params), params


def test_sample_frequency():
    state, params = _biased([0.1, 0.7, 0.2])
    assert np.allclose(step(state, params), [0.1, 0.7, 0.2])
    hits = sum(sample_decode(state, params, 1, seed)[0] == 1 for seed in range(10_000))
    assert abs(hits / 10_000 - 0.7) <= 0.02


def test_sample_reproducible_and_one_hot():
    state, params = make_state()
    assert sample_decode(state, params, 5, seed=9) == sample_decode(state, params, 5, seed=9)
    state, params = _biased([0.0, 0.0, 1.0, 0.0])
    assert sample_decode(state, params, 4, seed=3) == greedy_decode(state, params, 4) == [2] * 4


def test_cold_sampling_matches_greedy():
    state, params = make_state(seed=5)
    pi = step(state, params)
    assert np.sort(pi)[-1] > np.sort(pi)[-2]
    for seed in range(5):
        assert sample_decode(state, params, 4, seed, temperature=1e-6) == greedy_decode(state, params, 4)


def test_sample_validation():
    state, params = make_state()
    with pytest.raises(SchemaError):
        sample_decode(state, params, 2, 0, temperature=0.0)
    assert sample_decode(state, params, 5, 0, stop_id=sample_decode(state, params, 1, 0)[0]) == \
        sample_decode(state, params, 1, 0)  # fmt: skip
