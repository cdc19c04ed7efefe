"""Replay buffer maintenance policies."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goalkeep import (BufferEntry, ConfigurationError, DiversityBuffer,
                      ReservoirBuffer, composition, diversity_score,
                      sample_joint)

from conftest import rand_sample


def rng_state(rng):
    return repr(rng.bit_generator.state)


# -- reservoir ---------------------------------------------------------------


def test_reservoir_fill_phase_keeps_everything():
    buf = ReservoirBuffer(5)
    rng = np.random.default_rng(0)
    state = rng_state(rng)
    for i in range(5):
        assert buf.offer(i, rng)
    assert buf.items == [0, 1, 2, 3, 4]
    assert buf.n_seen == 5
    assert rng_state(rng) == state    # fill phase consumes no randomness


def test_reservoir_capacity_never_exceeded():
    buf = ReservoirBuffer(3)
    rng = np.random.default_rng(1)
    for i in range(100):
        buf.offer(i, rng)
        assert len(buf) <= 3
    assert buf.n_seen == 100


def test_reservoir_capacity_zero_is_disabled():
    buf = ReservoirBuffer(0)
    rng = np.random.default_rng(2)
    state = rng_state(rng)
    assert not buf.offer("x", rng)
    assert buf.offer_many(["a", "b"], rng) == 0
    assert len(buf) == 0
    assert buf.n_seen == 3
    assert rng_state(rng) == state
    assert buf.sample(4, rng) == []


def test_reservoir_inclusion_probability_cap2_stream4():
    """Every item of a 4-item stream should be kept with probability 1/2."""
    hits = np.zeros(4)
    trials = 20_000
    rng = np.random.default_rng(42)
    for _ in range(trials):
        buf = ReservoirBuffer(2)
        for i in range(4):
            buf.offer(i, rng)
        for item in buf.items:
            hits[item] += 1
    freq = hits / trials
    assert np.all(np.abs(freq - 0.5) < 0.02)


def test_reservoir_cap1_final_item_probability():
    """With capacity 1 and n offers, the last item survives with prob 1/n."""
    trials = 20_000
    n = 5
    rng = np.random.default_rng(7)
    kept_last = 0
    for _ in range(trials):
        buf = ReservoirBuffer(1)
        for i in range(n):
            buf.offer(i, rng)
        kept_last += buf.items[0] == n - 1
    assert abs(kept_last / trials - 1.0 / n) < 0.02


def test_offer_many_matches_sequential_bitwise():
    for seed in range(5):
        seq = ReservoirBuffer(10)
        bulk = ReservoirBuffer(10)
        rng_a = np.random.default_rng(seed)
        rng_b = np.random.default_rng(seed)
        items = list(range(137))
        for it in items:
            seq.offer(it, rng_a)
        bulk.offer_many(items, rng_b)
        assert seq.items == bulk.items
        assert seq.n_seen == bulk.n_seen
        assert rng_state(rng_a) == rng_state(rng_b)


def test_offer_many_in_chunks_matches_sequential():
    seq = ReservoirBuffer(4)
    bulk = ReservoirBuffer(4)
    rng_a = np.random.default_rng(3)
    rng_b = np.random.default_rng(3)
    items = list(range(50))
    for it in items:
        seq.offer(it, rng_a)
    for lo in range(0, 50, 7):
        bulk.offer_many(items[lo:lo + 7], rng_b)
    assert seq.items == bulk.items
    assert rng_state(rng_a) == rng_state(rng_b)


def test_reservoir_sample_uniform_without_replacement():
    buf = ReservoirBuffer(10)
    rng = np.random.default_rng(0)
    for i in range(10):
        buf.offer(i, rng)
    drawn = buf.sample(6, rng)
    assert len(drawn) == 6
    assert len(set(drawn)) == 6
    assert buf.sample(20, rng) != buf.items or len(buf.sample(20, rng)) == 10


def test_reservoir_state_roundtrip():
    buf = ReservoirBuffer(3)
    rng = np.random.default_rng(5)
    for i in range(9):
        buf.offer(i, rng)
    clone = ReservoirBuffer.from_state(buf.state())
    assert clone.items == buf.items
    assert clone.n_seen == buf.n_seen
    assert clone.capacity == buf.capacity


@settings(max_examples=40, deadline=None)
@given(cap=st.integers(0, 8), n=st.integers(0, 60), seed=st.integers(0, 999))
def test_reservoir_invariants(cap, n, seed):
    buf = ReservoirBuffer(cap)
    rng = np.random.default_rng(seed)
    buf.offer_many(list(range(n)), rng)
    assert len(buf) == min(cap, n)
    assert buf.n_seen == n


def test_reservoir_rejects_negative_capacity():
    with pytest.raises(ConfigurationError):
        ReservoirBuffer(-1)


# -- diversity score ---------------------------------------------------------


def test_diversity_score_duplicate_is_two():
    g = np.array([1.0, 2.0, 3.0])
    assert diversity_score(g, [g.copy()]) == pytest.approx(2.0, abs=1e-12)


def test_diversity_score_orthogonal_is_one():
    assert diversity_score(np.array([1.0, 0.0]),
                           [np.array([0.0, 1.0])]) == pytest.approx(1.0, abs=1e-12)


def test_diversity_score_opposite_is_zero():
    g = np.array([2.0, -1.0])
    assert diversity_score(g, [-g]) == pytest.approx(0.0, abs=1e-12)


def test_diversity_score_takes_max_over_references():
    g = np.array([1.0, 0.0])
    refs = [np.array([-1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
    expected = 1.0 + 1.0 / np.sqrt(2)
    assert diversity_score(g, refs) == pytest.approx(expected, abs=1e-12)


def test_diversity_score_skips_zero_norm_references():
    g = np.array([1.0, 0.0])
    refs = [np.zeros(2), np.array([0.0, -1.0])]
    assert diversity_score(g, refs) == pytest.approx(1.0, abs=1e-12)


def test_diversity_score_all_unusable_returns_first_score():
    g = np.array([1.0, 0.0])
    assert diversity_score(g, [np.zeros(2), np.zeros(2)]) == 0.1
    assert diversity_score(np.zeros(2), [g]) == 0.1
    assert diversity_score(g, []) == 0.1


# -- diversity buffer --------------------------------------------------------


def stub_grad_fn(table):
    """grad_fn that looks td items up in a fixed row table (items are ints)."""
    def fn(items):
        return np.stack([table[i] for i in items])
    return fn


def test_diversity_first_entry_scores_point_one():
    buf = DiversityBuffer(4)
    rng = np.random.default_rng(0)
    table = {0: np.array([1.0, 0.0])}
    assert buf.offer(0, stub_grad_fn(table), rng)
    assert buf.scores == [0.1]


def test_diversity_fill_phase_always_stores():
    table = {i: np.array([np.cos(i), np.sin(i)]) for i in range(4)}
    buf = DiversityBuffer(4)
    rng = np.random.default_rng(0)
    for i in range(4):
        assert buf.offer(i, stub_grad_fn(table), rng)
    assert len(buf) == 4


def test_diversity_redundant_candidate_discarded_without_randomness():
    g = np.array([1.0, 1.0])
    table = {0: g, 1: g.copy(), 2: g.copy()}
    buf = DiversityBuffer(2)
    rng = np.random.default_rng(0)
    buf.offer(0, stub_grad_fn(table), rng)
    buf.offer(1, stub_grad_fn(table), rng)
    state = rng_state(rng)
    assert not buf.offer(2, stub_grad_fn(table), rng)   # q_n = 2 >= 1
    assert rng_state(rng) == state
    assert buf.items == [0, 1]


def test_diversity_two_entry_replacement_statistics():
    """Scores (1.9, 0.1) and candidate 0.05: victim 0 picked w.p. 0.95,
    then replaced w.p. 1.9/1.95."""
    trials = 20_000
    rng = np.random.default_rng(11)
    table = {
        0: np.array([1.0, 0.0]),
        1: np.array([1.0, 0.0]),
        2: np.array([-0.95, np.sqrt(1 - 0.95 ** 2)]),
    }
    stored0 = 0
    for _ in range(trials):
        buf = DiversityBuffer(2)
        buf.items = [0, 1]
        buf.scores = [1.9, 0.1]
        buf.n_seen = 2
        stored = buf.offer(2, stub_grad_fn(table), rng)
        if stored and buf.items[0] == 2:
            stored0 += 1
    # candidate q_n = 0.05; victim 0 w.p. 1.9/2.0, then replaced w.p.
    # 1.9/(1.9+0.05)
    assert abs(stored0 / trials - 0.95 * (1.9 / 1.95)) < 0.02


def test_diversity_capacity_zero_is_disabled():
    buf = DiversityBuffer(0)
    rng = np.random.default_rng(0)
    state = rng_state(rng)
    fn_calls = []

    def fn(items):
        fn_calls.append(items)
        return np.ones((len(items), 2))

    assert not buf.offer("a", fn, rng)
    assert buf.n_seen == 1
    assert fn_calls == []
    assert rng_state(rng) == state


def test_diversity_reference_subset_is_bounded():
    """With more entries than score_batch, each offer scores a subset."""
    seen_sizes = []

    def fn(items):
        seen_sizes.append(len(items) - 1)
        rngl = np.random.default_rng(len(seen_sizes))
        return rngl.normal(size=(len(items), 3))

    buf = DiversityBuffer(12, score_batch=4)
    rng = np.random.default_rng(9)
    for i in range(30):
        buf.offer(i, fn, rng)
    assert max(seen_sizes) <= 4


def test_diversity_same_seed_same_outcome():
    def run(seed):
        table = np.random.default_rng(99).normal(size=(40, 6))
        buf = DiversityBuffer(5, score_batch=3)
        rng = np.random.default_rng(seed)
        fn = stub_grad_fn({i: table[i] for i in range(40)})
        for i in range(40):
            buf.offer(i, fn, rng)
        return buf.items, buf.scores

    assert run(4) == run(4)
    items_a, _ = run(4)
    items_b, _ = run(5)
    assert items_a != items_b   # different seeds explore different outcomes


def test_diversity_state_roundtrip():
    table = np.random.default_rng(1).normal(size=(20, 4))
    buf = DiversityBuffer(3)
    rng = np.random.default_rng(2)
    fn = stub_grad_fn({i: table[i] for i in range(20)})
    for i in range(20):
        buf.offer(i, fn, rng)
    clone = DiversityBuffer.from_state(buf.state())
    assert clone.items == buf.items
    assert clone.scores == buf.scores
    assert clone.n_seen == buf.n_seen


# -- joint sampling and composition ------------------------------------------


def test_sample_joint_draws_from_both():
    res = ReservoirBuffer(10)
    div = DiversityBuffer(10)
    rng = np.random.default_rng(0)
    table = np.random.default_rng(3).normal(size=(10, 4))
    fn = stub_grad_fn({i: table[i] for i in range(10)})
    for i in range(10):
        res.offer(("r", i), rng)
        div.offer(i, fn, rng)
    dr, dd = sample_joint(res, div, 4, 3, rng)
    assert len(dr) == 4 and len(dd) == 3
    assert all(item[0] == "r" for item in dr)


def test_sample_joint_empty_buffers_consume_no_randomness():
    res = ReservoirBuffer(0)
    div = DiversityBuffer(0)
    rng = np.random.default_rng(0)
    state = rng_state(rng)
    assert sample_joint(res, div, 8, 8, rng) == ([], [])
    assert rng_state(rng) == state


def test_composition_counts_task_ids(rng):
    res = ReservoirBuffer(8)
    gen = np.random.default_rng(0)
    for t in (0, 0, 1, 2, 2, 2):
        res.offer(BufferEntry(sample=rand_sample(rng, task_id=t)), gen)
    assert composition(res) == {0: 2, 1: 1, 2: 3}
