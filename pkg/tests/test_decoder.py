import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsp_transformer import decoder as D
from tsp_transformer import tensor as T
from tsp_transformer.model import ModelConfig
from tsp_transformer.tensor import Tensor, gradcheck
from tsp_transformer.tsp import generate, stack

from conftest import SMALL, TINY, make_model


def test_pe_at_zero():
    pe = D.positional_encoding(0, 8)
    np.testing.assert_array_equal(pe, [0, 1, 0, 1, 0, 1, 0, 1])


def test_pe_d4_t1():
    np.testing.assert_allclose(D.positional_encoding(1, 4),
                               [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], atol=1e-15)


def test_pe_general_formula():
    d, t = 10, 37
    pe = D.positional_encoding(t, d)
    for k in range(d // 2):
        w = t / 10000 ** (2 * k / d)
        assert pe[2 * k] == pytest.approx(math.sin(w))
        assert pe[2 * k + 1] == pytest.approx(math.cos(w))


def test_pe_injective_up_to_1000():
    table = np.stack([D.positional_encoding(t, 128) for t in range(1001)])
    dist = np.sqrt(((table[:, None] - table[None]) ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    assert dist.min() > 1e-3


def test_start_state():
    model = make_model()
    enc = model.encode(stack(generate(6, 3, 0)))
    state = model.start(enc)
    assert state.t == 0 and not state.visited.any() and state.partial.shape == (3, 0)
    h = D.step_input(state).data
    np.testing.assert_allclose(h, enc.data[:, 0] + D.positional_encoding(0, SMALL.d))
    again = model.start(enc)
    np.testing.assert_array_equal(D.step_input(again).data, h)


def test_last_city_gets_probability_one():
    model = make_model()
    enc = model.encode(stack(generate(5, 1, 2)))
    state = model.start(enc)
    for c in (3, 0, 4, 1):
        state = D.advance(state, [c], model.step(state))
    probs = model.step(state).probs.data[0]
    assert probs[2] == 1.0 and probs.sum() == 1.0


def _zero_pointer(model):
    model.params["dec.ptr.Wq"].data[:] = 0.0
    return model


def test_equal_logits_give_uniform():
    model = _zero_pointer(make_model())
    enc = model.encode(stack(generate(6, 1, 3)))
    state = model.start(enc)
    state = D.advance(state, [1], model.step(state))
    state = D.advance(state, [4], model.step(state))
    probs = model.step(state).probs.data[0]
    np.testing.assert_allclose(probs, [0.25, 0, 0.25, 0.25, 0, 0.25], atol=1e-12)


def test_logits_are_clipped():
    model = make_model()
    model.params["dec.ptr.Wq"].data *= 1e4
    enc = model.encode(stack(generate(8, 2, 4)))
    dist = model.step(model.start(enc))
    assert np.all(np.abs(dist.logits) <= 10.0)
    assert np.max(np.abs(dist.logits)) > 9.0


def test_tour_complete_and_bad_advance():
    model = make_model()
    enc = model.encode(stack(generate(3, 1, 5)))
    state = model.start(enc)
    step = model.step(state)
    state = D.advance(state, [1], step)
    step = model.step(state)
    with pytest.raises(D.DecodeError, match="already visited"):
        D.advance(state, [1], step)
    with pytest.raises(D.DecodeError):
        D.advance(state, [3], step)
    step = model.step(state)
    state = D.advance(state, [0], step)
    state = D.advance(state, [2], model.step(state))
    assert state.t == 3 and state.visited.all()
    with pytest.raises(D.DecodeError, match="tour complete"):
        model.step(state)


def test_chosen_city_zero_after_advance():
    model = make_model()
    enc = model.encode(stack(generate(7, 2, 6)))
    state = model.start(enc)
    state = D.advance(state, [5, 2], model.step(state))
    probs = model.step(state).probs.data
    assert probs[0, 5] == 0.0 and probs[1, 2] == 0.0


@pytest.mark.parametrize("config", [SMALL, ModelConfig(d=16, heads=4, enc_layers=1, dec_layers=3, d_ff=16)])
def test_cache_matches_full_recompute(config):
    model = make_model(config, seed=4)
    n = 9
    coords = stack(generate(n, 3, 8))
    enc = model.encode(coords)
    rng = np.random.default_rng(1)
    state = model.start(enc)
    cached = []
    for _ in range(n):
        dist = model.step(state)
        cached.append(dist.probs.data)
        chosen = [rng.choice(np.flatnonzero(~state.visited[b])) for b in range(3)]
        state = D.advance(state, chosen, dist)
    reference = D.prefix_distributions(enc, model.params, config, state.partial).data
    assert reference.shape == (3, n, n)
    assert np.max(np.abs(np.stack(cached, axis=1) - reference)) < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**31))
def test_rollout_invariants(n, seed):
    model = make_model(ModelConfig(d=8, heads=2, enc_layers=1, dec_layers=1, d_ff=8), seed=seed % 1000)
    rng = np.random.default_rng(seed)
    enc = model.encode(rng.random((2, n, 2)))
    state = model.start(enc)
    for _ in range(n):
        dist = model.step(state)
        p = dist.probs.data
        assert np.all(p[state.visited] == 0.0)
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
        chosen = [rng.choice(n, p=row / row.sum()) for row in p]
        state = D.advance(state, chosen, dist)
    for row in state.partial:
        assert sorted(row.tolist()) == list(range(n))


def test_full_step_gradcheck():
    model = make_model(TINY, n=5)
    coords = stack(generate(5, 2, 11))
    tours = np.array([[2, 0, 4, 1, 3], [1, 3, 0, 2, 4]])
    names = sorted(model.params)

    def loss():
        enc = D.start_state(model.encode(coords, training=True), model.params, model.config).memory.enc
        state = model.start(enc)
        total = None
        for t in range(5):
            dist = model.step(state)
            term = T.sum(T.log(T.gather_rows(dist.probs, tours[:, t])))
            total = term if total is None else T.add(total, term)
            state = D.advance(state, tours[:, t], dist)
        return total

    errs = gradcheck(loss, [model.params[k] for k in names])
    worst = max(zip(errs, names))
    assert worst[0] < 1e-4, worst


def test_sequence_log_prob_matches_incremental():
    model = make_model()
    coords = stack(generate(6, 2, 12))
    tours = np.array([[0, 1, 2, 3, 4, 5], [5, 3, 1, 0, 2, 4]])
    enc = model.encode(coords)
    state = model.start(enc)
    total = np.zeros(2)
    for t in range(6):
        dist = model.step(state)
        total += np.log(dist.probs.data[np.arange(2), tours[:, t]])
        state = D.advance(state, tours[:, t], dist)
    np.testing.assert_allclose(model.sequence_log_prob(enc, tours).data, total, atol=1e-10)


def test_state_select_duplicates_rows():
    model = make_model()
    enc = model.encode(stack(generate(5, 2, 13)))
    state = model.start(enc).select(np.array([1, 1, 0]))
    assert state.batch == 3
    dist = model.step(state)
    np.testing.assert_allclose(dist.probs.data[0], dist.probs.data[1])
    state = D.advance(state, [0, 1, 2], dist).select(np.array([2]))
    assert state.partial.tolist() == [[2]]
    assert isinstance(state.self_k[0], Tensor)
