import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpltm.data_io import make_separable
from dpltm.nn import NetworkParams, full_mask, init_network, mask_fraction
from dpltm.tickets import (PruneError, default_prune_rates, generate_tickets, prune_step, reset_to_init,
                           round_half_up)


def one_layer(values, mask=None):
    w = np.asarray(values, dtype=float).reshape(-1, 1)
    p = NetworkParams([len(values), 1], [w], [np.zeros(1)])
    return p, [np.ones_like(w, dtype=bool) if mask is None else np.asarray(mask).reshape(-1, 1)]


def test_prune_smallest_magnitudes():
    p, m = one_layer([0.9, -0.05, 0.4, 0.01, -0.7, 0.2, 0.3, 0.6, 0.8, -0.1])
    new = prune_step(p, m, [0.3])[0].ravel()
    pruned = np.abs(p.weights[0].ravel()[~new])
    assert sorted(pruned.tolist()) == [0.01, 0.05, 0.1]


def test_prune_survivor_recurrence_100():
    p, m = one_layer(np.random.default_rng(0).normal(size=100))
    m1 = prune_step(p, m, [0.3])
    m2 = prune_step(p, m1, [0.3])
    assert m1[0].sum() == 70 and m2[0].sum() == 49


def test_prune_never_resurrects_or_recounts():
    # index 0 is already pruned and has the smallest magnitude
    p, m = one_layer([1e-9, 0.5, 0.2, 0.9, 0.4], mask=[False, True, True, True, True])
    new = prune_step(p, m, [0.5])[0].ravel()
    assert not new[0]
    # round_half_up(0.5 * 4) = 2 of the 4 survivors: 0.2 and 0.4
    assert new.tolist() == [False, True, False, True, False]


def test_prune_ties_lowest_index_first():
    p, m = one_layer([0.5, 0.1, 0.1, 0.1, 0.9])
    new = prune_step(p, m, [0.4])[0].ravel()
    assert new.tolist() == [True, False, False, True, True]


def test_prune_rejects_empty_layer_and_bad_rate():
    p, m = one_layer([0.1, 0.2])
    with pytest.raises(PruneError):
        prune_step(p, m, [0.9])  # round(1.8) = 2 -> nothing left
    with pytest.raises(PruneError):
        prune_step(p, m, [1.0])


@settings(max_examples=50, deadline=None)
@given(rate=st.floats(0.05, 0.6), n=st.integers(20, 300), rounds=st.integers(1, 4),
       seed=st.integers(0, 1000))
def test_survivor_recurrence_and_monotone(rate, n, rounds, seed):
    p, m = one_layer(np.random.default_rng(seed).normal(size=n))
    s = n
    for _ in range(rounds):
        k = round_half_up(rate * s)
        if s - k < 1:
            break
        new = prune_step(p, m, [rate])
        assert np.all(new[0] <= m[0])
        s -= k
        assert int(new[0].sum()) == s
        m = new


def test_default_rates():
    assert default_prune_rates(3) == [0.3, 0.3, 0.2]


def test_reset_to_init():
    theta0 = init_network([5, 4, 3], 1)
    trained = theta0.copy()
    for w in trained.weights:
        w += 1.0
    mask = full_mask(theta0)
    out = reset_to_init(trained, theta0, mask)
    assert out.equals(theta0)
    assert reset_to_init(out, theta0, mask).equals(out)
    with pytest.raises(ValueError):
        reset_to_init(init_network([5, 3], 0), theta0, mask)


@pytest.fixture(scope="module")
def toy():
    ds = make_separable(250, seed=3)
    return ds.take(np.arange(200)).batch(), ds.take(np.arange(200, 250)).batch()


def test_generate_tickets_single_round_accuracy(toy):
    train, test = toy
    store = generate_tickets(train, test, [2, 16, 2], T=1, iters_per_ticket=500, lr=0.5, batch_size=20,
                             seed=0)
    assert store.records[0].accuracy >= 0.95


def test_generate_tickets_invariants(toy):
    train, test = toy
    store = generate_tickets(train, test, [2, 16, 8, 2], T=4, iters_per_ticket=50, lr=0.2,
                             batch_size=20, seed=5)
    theta0 = init_network([2, 16, 8, 2], 5)
    assert store.theta0.equals(theta0)
    assert [r.index for r in store.records] == [1, 2, 3, 4]
    prev = full_mask(theta0)
    fracs = []
    for r in store.records:
        assert all(np.all(a <= b) for a, b in zip(r.mask, prev))
        assert r.fraction == mask_fraction(r.mask)
        fracs.append(r.fraction)
        prev = r.mask
    assert all(a > b for a, b in zip(fracs, fracs[1:]))
    again = generate_tickets(train, test, [2, 16, 8, 2], T=4, iters_per_ticket=50, lr=0.2,
                             batch_size=20, seed=5)
    assert [r.accuracy for r in again.records] == [r.accuracy for r in store.records]
    assert all(np.array_equal(a, b) for r1, r2 in zip(again.records, store.records)
               for a, b in zip(r1.mask, r2.mask))


def test_generate_tickets_mnist_shape_fractions():
    # fractions depend only on dims and rates, so a 2-iteration run suffices
    rng = np.random.default_rng(0)
    from dpltm.nn import LabeledBatch
    train = LabeledBatch(rng.random((40, 784)), rng.integers(0, 10, 40))
    store = generate_tickets(train, train, [784, 300, 100, 10], T=2, iters_per_ticket=1,
                             prune_rates=(0.3, 0.3, 0.2), batch_size=20, seed=0)
    s1 = [235200 - round_half_up(0.3 * 235200), 30000 - 9000, 1000 - 200]
    s2 = [s1[0] - round_half_up(0.3 * s1[0]), s1[1] - round_half_up(0.3 * s1[1]),
          s1[2] - round_half_up(0.2 * s1[2])]
    assert [int(m.sum()) for m in store.records[0].mask] == s1
    assert [int(m.sum()) for m in store.records[1].mask] == s2
    assert store.records[1].fraction == sum(s2) / 266_200


def test_generate_tickets_aborts_when_layer_empties(toy):
    train, test = toy
    with pytest.raises(PruneError):
        generate_tickets(train, test, [2, 2, 2], T=10, iters_per_ticket=1, prune_rates=(0.5, 0.5),
                         batch_size=20, seed=0)


def test_reset_fidelity_during_generation(toy, monkeypatch):
    """At the start of every round the network handed to training equals theta0."""
    import dpltm.tickets as tk
    train, test = toy
    seen = []
    real = tk.train_sgd

    def spy(params, mask, *a, **k):
        seen.append(params.copy())
        return real(params, mask, *a, **k)

    monkeypatch.setattr(tk, "train_sgd", spy)
    store = tk.generate_tickets(train, test, [2, 8, 2], T=3, iters_per_ticket=30, lr=0.3,
                                batch_size=20, seed=2)
    assert len(seen) == 3 and all(p.equals(store.theta0) for p in seen)
