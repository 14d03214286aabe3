import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advldm.rng import Rng, sample_normal


def test_same_seed_same_stream():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.raw(16), b.raw(16))
    assert np.array_equal(sample_normal(Rng(3), (5, 4)), sample_normal(Rng(3), (5, 4)))


def test_different_seeds_and_streams_differ():
    assert not np.array_equal(Rng(1).raw(8), Rng(2).raw(8))
    assert not np.array_equal(Rng(1, stream=0).raw(8), Rng(1, stream=1).raw(8))


def test_normal_moments():
    x = sample_normal(Rng(2024), (10**6,))
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.02


def test_consecutive_draws_use_disjoint_counter_ranges():
    rng = Rng(11)
    start = rng.position
    first = rng.normal((3, 5))
    mid = rng.position
    second = rng.normal((3, 5))
    assert start < mid < rng.position
    # replaying the stream shows the second draw came from fresh words
    replay = Rng(11)
    replay.raw(mid)
    assert np.array_equal(replay.normal((3, 5)), second)
    assert not np.array_equal(first, second)


def test_fork_leaves_parent_untouched():
    a, b = Rng(5), Rng(5)
    a.fork(3).raw(100)
    assert np.array_equal(a.raw(4), b.raw(4))
    assert not np.array_equal(Rng(5).fork(0).raw(4), Rng(5).fork(1).raw(4))


def test_uniform_open_interval():
    u = Rng(0).uniform(100000)
    assert u.min() > 0.0 and u.max() < 1.0


@given(st.integers(0, 2**64 - 1), st.integers(-5, 5), st.integers(0, 20))
@settings(max_examples=50, deadline=None)
def test_integers_inclusive_range(seed, low, span):
    v = Rng(seed).integers(low, low + span, (200,))
    assert v.min() >= low and v.max() <= low + span


def test_integers_hits_both_ends():
    v = Rng(1).integers(1, 4, (2000,))
    assert set(v.tolist()) == {1, 2, 3, 4}


def test_choice_distinct():
    idx = Rng(9).choice(50, 50)
    assert sorted(idx.tolist()) == list(range(50))
    with pytest.raises(ValueError):
        Rng(9).choice(3, 4)


def test_seed_range_checked():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)


def test_known_answer_values():
    # pinned so that a change of bit generator or of the float mapping is caught
    assert [int(w) for w in Rng(0).raw(3)] == [0x2F4BA6408E4D89B, 0x3DD62B0B9CA8C5B2, 0x1C8667A55D902E79]
    r = Rng(42, stream=7)
    assert r.uniform(2).tolist() == [0.6494200796137362, 0.8848813535936773]
    assert r.normal(2).tolist() == [1.0401432402619608, -0.3166132594975223]
    assert Rng(1).fork(3).stream == 7289073745999610579
