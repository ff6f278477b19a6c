import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capsroute import tensor as T
from capsroute.data import gen_toy_votes
from capsroute.gradcheck import grad_check
from capsroute.kernels import CosineKernel, GaussianMixtureKernel
from capsroute.routing import route
from capsroute.similarity import (SimilarityRouting, activation_eval, clustering_objective,
                                  compatibility_update, kl_uniform, solve_toy)

from oracles import alternating_minimization, grid_minimize


def update(s, a, lam1, lam2):
    with T.precision(64):
        return compatibility_update(np.asarray(s, float), np.asarray(a, float), lam1, lam2).data


def test_objective_uniform_c_has_no_uniformity_penalty():
    c = np.full(4, 0.25)
    s = np.array([0.3, -0.1, 0.7, 0.2])
    assert clustering_objective(c, s, np.ones(4), 5.0, 0.0) == pytest.approx(-(c * s).sum(), abs=1e-15)


def test_objective_c_equal_a_has_no_prior_penalty():
    c = np.array([0.6, 0.3, 0.1])
    s = np.array([0.2, 0.4, -0.5])
    kl_u = sum(x * math.log(3 * x) for x in c)
    assert clustering_objective(c, s, c, 1.0, 7.0) == pytest.approx(-(c * s).sum() + kl_u, abs=1e-14)


def test_objective_three_vote_value():
    c = [0.5, 0.3, 0.2]
    s = [1.0, 0.0, -1.0]
    a = [1 / 3] * 3
    kl = sum(x * math.log(3 * x) for x in c)
    expected = -(0.5 - 0.2) + kl + kl  # with a uniform, both divergences coincide
    assert clustering_objective(np.array(c), np.array(s), np.array(a), 1.0, 1.0) == pytest.approx(expected, abs=1e-14)


def test_objective_zero_activation_is_domain_error():
    with pytest.raises(T.DomainError):
        clustering_objective(np.array([0.5, 0.5]), np.zeros(2), np.array([1.0, 0.0]), 1.0, 1.0)
    # a zero activation under a zero compatibility is fine
    clustering_objective(np.array([1.0, 0.0]), np.zeros(2), np.array([1.0, 0.0]), 1.0, 1.0)


def test_single_vote_gets_all_weight():
    np.testing.assert_array_equal(update([0.3], [0.2], 0.5, 0.5), [1.0])


def test_symmetric_inputs_give_uniform():
    np.testing.assert_allclose(update(np.full(5, 0.4), np.full(5, 0.7), 0.3, 2.0), 0.2, atol=1e-15)


def test_large_uniformity_penalty_gives_uniform():
    rng = np.random.default_rng(0)
    c = update(rng.uniform(-0.5, 0.5, 8), rng.uniform(0.1, 1, 8), 100.0, 0.0)
    assert np.abs(c - 1 / 8).max() < 1e-3


def test_uniform_limit_deviation_bound():
    # c_i - 1/n ~ (s_i - mean s) / (n lam1) to first order
    rng = np.random.default_rng(10)
    for n in (2, 8, 50):
        s = rng.uniform(-1, 1, n)
        c = update(s, np.ones(n), 100.0, 0.0)
        bound = np.abs(s - s.mean()).max() / (n * 100.0)
        assert np.abs(c - 1 / n).max() <= 1.05 * bound


def test_three_vote_update_matches_grid_oracle():
    rng = np.random.default_rng(1)
    s, a = rng.uniform(-1, 1, 3), rng.uniform(0.05, 1, 3)
    ref, _ = grid_minimize(s, a, 0.7, 0.4)
    np.testing.assert_allclose(update(s, a, 0.7, 0.4), ref, atol=2e-2)


def test_update_without_prior_is_tempered_softmax():
    rng = np.random.default_rng(2)
    s = rng.uniform(-2, 2, 6)
    ref = np.exp(s / 0.3 - (s / 0.3).max())
    np.testing.assert_allclose(update(s, rng.uniform(0.1, 1, 6), 0.3, 0.0), ref / ref.sum(), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.integers(0, 2**31))
def test_update_stays_on_simplex(n, lam1, lam2, seed):
    rng = np.random.default_rng(seed)
    c = update(rng.uniform(-3, 3, n), rng.uniform(0.0, 1.0, n), lam1, lam2)
    assert np.all(c >= 0)
    assert abs(c.sum() - 1) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.floats(-50, 50), st.integers(0, 2**31))
def test_similarity_shift_invariance(n, shift, seed):
    rng = np.random.default_rng(seed)
    s, a = rng.uniform(-1, 1, n), rng.uniform(0.05, 1, n)
    np.testing.assert_allclose(update(s + shift, a, 0.8, 0.6), update(s, a, 0.8, 0.6), atol=1e-9)


def test_update_is_a_descent_step():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 10))
        s, a = rng.uniform(-1, 1, n), rng.uniform(0.05, 1, n)
        lam1, lam2 = rng.uniform(0.01, 3, 2)
        prev = rng.dirichlet(np.ones(n))
        new = update(s, a, lam1, lam2)
        assert clustering_objective(new, s, a, lam1, lam2) <= clustering_objective(prev, s, a, lam1, lam2) + 1e-9


def test_kl_uniform_is_log_n_minus_entropy():
    rng = np.random.default_rng(4)
    with T.precision(64):
        for n in (2, 5, 11):
            c = rng.dirichlet(np.ones(n))
            kl = float(kl_uniform(T.tensor(c)).data)
            assert kl == pytest.approx(np.log(n) + (c * np.log(c)).sum(), abs=1e-9)
            assert kl >= 0
            assert abs(float(kl_uniform(T.tensor(np.full(n, 1 / n))).data)) < 1e-9


def _parallel_votes(n):
    mu = np.zeros(16)
    mu[0] = 1.0
    votes = np.zeros((n, 16))
    votes[:, 0] = np.arange(1, n + 1)
    return T.tensor(mu), T.tensor(votes)


def test_activation_with_zero_gains_is_half(f64):
    mu, votes = _parallel_votes(3)
    p = activation_eval(mu, votes, T.tensor(np.full(3, 1 / 3)), T.tensor(np.array([0.2, 0.5, 0.9])),
                        CosineKernel(), 0.0, 0.0, 0.0)
    assert float(p.data) == 0.5


def test_activation_without_divergence(f64):
    mu, votes = _parallel_votes(3)
    c = np.array([0.2, 0.3, 0.5])
    p = activation_eval(mu, votes, T.tensor(c), T.tensor(c), CosineKernel(), 1.7, 3.0, -0.4)
    assert float(p.data) == pytest.approx(1 / (1 + math.exp(-(1.7 * 1.0 - 0.4))), abs=1e-12)


def test_activation_two_vote_value(f64):
    mu, votes = _parallel_votes(2)
    c = np.array([0.8, 0.2])
    kl = 0.8 * math.log(0.8 / 0.5) + 0.2 * math.log(0.2 / 0.5)
    p = activation_eval(mu, votes, T.tensor(c), T.tensor(np.array([0.5, 0.5])), CosineKernel(), 1.0, 1.0, 0.0)
    assert float(p.data) == pytest.approx(1 / (1 + math.exp(-(1 - kl))), abs=1e-12)


def test_all_parameters_pass_grad_check_through_route(f64):
    rng = np.random.default_rng(5)
    proc = SimilarityRouting(3, GaussianMixtureKernel(3))
    for _, p in proc.named_parameters():
        p.data += rng.normal(0.0, 0.5, p.shape)
    votes = T.tensor(rng.standard_normal((2, 3, 6, 16)) * 0.4)
    acts = T.tensor(rng.uniform(0.05, 1.0, (2, 1, 6)))
    proj_p = T.tensor(rng.standard_normal((2, 3)))
    proj_mu = T.tensor(rng.standard_normal((2, 3, 16)))

    def fn():
        out = route(votes, acts, proc, iterations=3)
        return T.sum_(out.activation * proj_p) + T.sum_(out.pose * proj_mu)

    report = grad_check(fn, dict(proc.named_parameters()), step=1e-4)
    assert report.passed, report.table()


def test_toy_uniform_limit():
    cloud = gen_toy_votes(seed=1)
    (res,) = solve_toy(cloud.votes, cloud.activations, [(100.0, 0.0)])
    assert np.abs(res.compatibility - 1 / len(cloud.votes)).max() < 1e-3
    assert np.abs(res.pose - cloud.votes.mean(0)).max() < 1e-3


def test_toy_prior_dominated_limit():
    cloud = gen_toy_votes(seed=2)
    a = np.random.default_rng(0).uniform(0.05, 1.0, len(cloud.votes))
    (res,) = solve_toy(cloud.votes, a, [(1.0, 1000.0)])
    assert np.abs(res.compatibility - a / a.sum()).max() < 1e-3


def test_toy_small_penalties_pick_one_cluster():
    cloud = gen_toy_votes(seed=3)
    (res,) = solve_toy(cloud.votes, cloud.activations, [(0.05, 0.05)])
    mass = [res.compatibility[cloud.clusters == k].sum() for k in (0, 1)]
    assert max(mass) >= 0.95
    ref_c, ref_mu = alternating_minimization(cloud.votes, cloud.activations, 0.05, 0.05,
                                             iterations=res.iterations)
    np.testing.assert_allclose(res.compatibility, ref_c, atol=1e-8)
    np.testing.assert_allclose(res.pose, ref_mu, atol=1e-8)


def test_toy_grid_returns_one_row_per_pair():
    cloud = gen_toy_votes(seed=4, n=20)
    grid = [(1.0, 0.0), (0.1, 0.5), (2.0, 2.0)]
    res = solve_toy(cloud.votes, cloud.activations, grid)
    assert [(r.lambda1, r.lambda2) for r in res] == grid
