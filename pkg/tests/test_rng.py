import numpy as np

from protoadapt.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42)
    b = Rng(42)
    assert [a.next_u64() for _ in range(1000)] == [b.next_u64() for _ in range(1000)]


def test_different_seeds_differ():
    assert Rng(1).next_u64() != Rng(2).next_u64()


def test_uniform_half_open():
    rng = Rng(7)
    draws = rng.uniform_n(50000)
    assert draws.min() >= 0.0
    assert draws.max() < 1.0


def test_gauss_mean_near_zero():
    rng = Rng(123)
    draws = rng.gauss_n(100000)
    assert -0.02 <= draws.mean() <= 0.02


def test_bulk_matches_scalar_calls():
    a = Rng(99)
    b = Rng(99)
    bulk = a.uniform_n(257)
    scalar = np.array([b.uniform() for _ in range(257)])
    assert np.array_equal(bulk, scalar)

    a2 = Rng(99)
    b2 = Rng(99)
    gbulk = a2.gauss_n(100)
    gscalar = np.array([b2.gauss() for _ in range(100)])
    assert np.array_equal(gbulk, gscalar)


def test_index_range():
    rng = Rng(5)
    draws = {rng.index(7) for _ in range(2000)}
    assert draws == set(range(7))


def test_shuffle_is_permutation():
    rng = Rng(11)
    items = list(range(20))
    rng.shuffle(items)
    assert sorted(items) == list(range(20))
    assert items != list(range(20))
