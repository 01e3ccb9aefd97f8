import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_allocation, cv_of
from strataopt.bethel import AllocationError, bethel, bethel_arrays, cv_arrays, expected_cv
from strataopt.frame import PrecisionConstraints
from strataopt.stats import StratumSummary


def test_single_stratum_closed_form():
    a = bethel_arrays([10000], [[100]], [[20]], 1.0, np.array([0.05]))
    assert a.n_real[0] == pytest.approx(1 / (0.05**2 * 100**2 / 20**2 + 1 / 10000))
    assert a.n.tolist() == [16]
    assert a.converged


def test_zero_sd_gives_minimum():
    a = bethel_arrays([10, 1, 30], np.ones((3, 2)), np.zeros((3, 2)), 1.0, np.array([0.1, 0.1]))
    assert a.n.tolist() == [2, 1, 2]


def test_zero_total_is_error():
    with pytest.raises(AllocationError):
        bethel_arrays([10, 10], [[1.0], [-1.0]], [[1.0], [1.0]], 1.0, np.array([0.1]))


def test_two_strata_within_one_of_brute_force():
    N, mean, sd = [50, 50], [[10], [10]], [[1], [5]]
    a = bethel_arrays(N, mean, sd, 1.0, np.array([0.03]))
    best, n_best = brute_force_allocation(N, mean, sd, [0.03])
    assert a.total <= best + 2
    assert np.all(a.n <= n_best + 1)
    assert cv_of(N, mean, sd, a.n)[0] <= 0.03 + 1e-12


def test_census_cv_zero():
    N = np.array([5.0, 7.0])
    assert np.all(cv_arrays(N, [[1.0], [2.0]], [[1.0], [3.0]], N) == 0)


def test_expected_cv_errors_on_zero_n():
    with pytest.raises(AllocationError):
        cv_arrays([5], [[1.0]], [[1.0]], [0])


def strata_list(N, mean, sd, dom=1):
    return [StratumSummary(h + 1, int(N[h]), np.atleast_1d(mean[h]), np.atleast_1d(sd[h]), 1.0, dom) for h in range(len(N))]


def test_bethel_on_summaries_sets_n_and_uses_constraints():
    s = strata_list([100, 200], [[5.0], [8.0]], [[2.0], [4.0]])
    a = bethel(s, PrecisionConstraints.uniform([0.05]))
    assert [x.n for x in s] == a.n.tolist()
    cv = expected_cv(s)
    assert cv[1][0] <= 0.05 + 1e-9


def test_bethel_rejects_mixed_domains():
    s = strata_list([10], [[1.0]], [[1.0]], dom=1) + strata_list([10], [[1.0]], [[1.0]], dom=2)
    with pytest.raises(AllocationError):
        bethel(s, [0.1])


def random_instance(r, H_max=5, q_max=3, N_max=500):
    H = int(r.integers(1, H_max + 1))
    q = int(r.integers(1, q_max + 1))
    N = r.integers(1, N_max, H).astype(float)
    mean = r.uniform(0.5, 20, (H, q))
    sd = r.uniform(0, 10, (H, q))
    cv = r.uniform(0.01, 0.3, q)
    return N, mean, sd, cv


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_feasible_when_converged(seed):
    N, mean, sd, cv = random_instance(np.random.default_rng(seed))
    a = bethel_arrays(N, mean, sd, 1.0, cv)
    if a.converged:
        assert np.all(cv_of(N, mean, sd, a.n) <= cv + 1e-6)
    assert np.all(a.n <= N) and np.all(a.n >= np.minimum(2, N))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_doubling_never_increases_cv(seed):
    r = np.random.default_rng(seed)
    N, mean, sd, _ = random_instance(r)
    n = np.minimum(N, r.integers(1, 50, len(N)))
    a = cv_arrays(N, mean, sd, n)
    b = cv_arrays(N, mean, sd, np.minimum(2 * n, N))
    assert np.all(b <= a + 1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_scale_invariance(seed, c):
    N, mean, sd, cv = random_instance(np.random.default_rng(seed), q_max=2)
    a = bethel_arrays(N, mean, sd, 1.0, cv)
    b = bethel_arrays(N, mean * c, sd * c, 1.0, cv)
    assert np.abs(a.n_real - b.n_real).max() <= 1e-6 * max(1.0, a.n_real.max())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.95))
def test_tightening_never_decreases_total(seed, shrink):
    r = np.random.default_rng(seed)
    N, mean, sd, cv = random_instance(r)
    k = int(r.integers(0, len(cv)))
    tight = cv.copy()
    tight[k] *= shrink
    a = bethel_arrays(N, mean, sd, 1.0, cv)
    b = bethel_arrays(N, mean, sd, 1.0, tight)
    assert b.total >= a.total - len(N)
    assert b.n_real.sum() >= a.n_real.sum() - 1e-6 * a.n_real.sum()


def test_unequal_costs_shift_allocation():
    N, mean, sd = [100, 100], [[10], [10]], [[5], [5]]
    a = bethel_arrays(N, mean, sd, [1.0, 4.0], np.array([0.02]))
    assert a.n[0] > a.n[1]
