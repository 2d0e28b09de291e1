import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncfl.errors import ConfigError
from asyncfl.sampling import (WITH, WITHOUT, SelectionPolicy, adaptive_sequence, closed_form_sample_mean_variance,
                              deterministic_sequence, iid_sequence, is_permutation,
                              monte_carlo_sample_mean_variance, p_index, permutation_lhs, select_clients,
                              verify_martingale_bound, verify_permutation_inequality)


def test_full_draw_is_permutation(rng):
    assert is_permutation(select_clients(10, 10, WITHOUT, rng))


def test_five_of_ten_distinct(rng):
    ids = select_clients(10, 5, WITHOUT, rng)
    assert len(set(ids)) == 5 and all(0 <= c < 10 for c in ids)


def test_j_greater_than_c_rejected(rng):
    with pytest.raises(ConfigError):
        select_clients(3, 4, WITHOUT, rng)
    assert len(select_clients(3, 4, WITH, rng)) == 4
    with pytest.raises(ConfigError):
        SelectionPolicy("sometimes")


def test_selection_frequency_binomial(rng):
    rounds, C, J = 10_000, 10, 5
    counts = np.zeros(C)
    for _ in range(rounds):
        counts[select_clients(C, J, WITHOUT, rng)] += 1
    p = J / C
    sd = np.sqrt(rounds * p * (1 - p))
    assert np.all(np.abs(counts - rounds * p) <= 3 * sd)


def test_closed_form_examples():
    assert closed_form_sample_mean_variance(2, 2, 1.0, WITHOUT) == 0.0
    assert closed_form_sample_mean_variance(2, 2, 1.0, WITH) == 0.5
    assert closed_form_sample_mean_variance(2, 1, 1.0, WITH) == 1.0
    assert closed_form_sample_mean_variance(2, 1, 1.0, WITHOUT) == 1.0
    with pytest.raises(ValueError):
        closed_form_sample_mean_variance(1, 1, 1.0, WITHOUT)


def test_with_replacement_enumeration_oracle():
    # m=2 population {-1, +1}: all 4 ordered samples of size 2
    pop = np.array([[-1.0], [1.0]])
    devs = [np.sum(pop[list(s)].mean(axis=0) ** 2) for s in itertools.product(range(2), repeat=2)]
    assert np.mean(devs) == pytest.approx(closed_form_sample_mean_variance(2, 2, 1.0, WITH))


def test_full_sample_without_replacement_is_exactly_zero(rng):
    X = rng.normal(size=(6, 3))
    mc = monte_carlo_sample_mean_variance(X, 6, WITHOUT, 500, rng)
    assert mc.variance < 1e-28


def test_mc_matches_closed_form_and_is_unbiased(rng):
    X = rng.normal(size=(10, 5))
    nu2 = float(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    for pol in (WITH, WITHOUT):
        mc = monte_carlo_sample_mean_variance(X, 3, pol, 100_000, rng)
        assert mc.variance == pytest.approx(closed_form_sample_mean_variance(10, 3, nu2, pol), rel=0.03)
        assert np.all(np.abs(mc.mean - X.mean(axis=0)) <= 3 * mc.mean_se)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.data())
def test_without_dominates_with(m, data):
    s = data.draw(st.integers(2, m - 1))
    assert closed_form_sample_mean_variance(m, s, 1.0, WITHOUT) < closed_form_sample_mean_variance(m, s, 1.0, WITH)


def test_iid_martingale(rng):
    v, d, m = 0.5, 3, 6
    rep = verify_martingale_bound(iid_sequence(v, d), m, v * d, 40_000, rng)
    assert rep.identity_holds and rep.bound_holds
    assert rep.total_variance == pytest.approx(m * v * d, rel=0.03)


def test_adaptive_and_single_term(rng):
    rep = verify_martingale_bound(adaptive_sequence(1.0, 2), 5, 1.0, 40_000, rng)
    assert rep.identity_holds and rep.bound_holds
    one = verify_martingale_bound(adaptive_sequence(1.0, 2), 1, 1.0, 20_000, rng)
    assert one.bound_holds


def test_deterministic_sequence_zero(rng):
    rep = verify_martingale_bound(deterministic_sequence(3), 4, 1.0, 100, rng)
    assert rep.total_variance == 0.0 and rep.identity_holds


def test_p_index_examples():
    assert p_index(3, 4, 1, 10) == 9
    assert p_index(3, 4, 3, 10) == 3
    assert p_index(2, 0, 2, 5) == -1
    with pytest.raises(ValueError):
        p_index(2, 0, 3, 5)


def _lhs_bruteforce(U, order, I):
    # literal double sum with p_index bookkeeping and empty-sum convention
    J = len(order)
    tot = 0.0
    for c in range(1, J + 1):
        for i in range(I):
            v = np.zeros(U.shape[1])
            for k in range(1, c + 1):
                for _ in range(p_index(c, i, k, I) + 1):
                    v = v + U[order[k - 1]]
            tot += v @ v
    return tot


def test_vectorized_lhs_matches_bruteforce(rng):
    U = rng.normal(size=(5, 2))
    U -= U.mean(axis=0)
    orders = np.array([[0, 3, 1], [4, 2, 0]])
    vals = permutation_lhs(U, orders, 4)
    for o, v in zip(orders, vals):
        assert v == pytest.approx(_lhs_bruteforce(U, list(o), 4), rel=1e-12)


def test_permutation_examples(rng):
    same = verify_permutation_inequality(np.ones((5, 3)), 3, 2, None)
    assert same.lhs == 0.0 and same.holds
    mc = verify_permutation_inequality(rng.normal(size=(8, 3)), 4, 3, 10_000, rng)
    assert mc.rhs == pytest.approx(216 * mc.nu2)
    assert mc.holds


def test_j1_i1_is_empty_sum():
    X = np.random.default_rng(3).normal(size=(6, 2))
    rep = verify_permutation_inequality(X, 1, 1, None)
    assert rep.exhaustive and rep.n_orders == 6
    assert rep.lhs == 0.0 and rep.holds


def test_permutation_needs_two_clients():
    with pytest.raises(ConfigError):
        verify_permutation_inequality(np.ones((1, 2)), 1, 1, None)
