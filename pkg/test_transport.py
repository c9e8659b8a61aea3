import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from numerics_core import (EmpiricalDistribution, GridMismatchError,
                           InvalidArgumentError, TransportNotConverged)
from transport import (SinkhornConfig, _AbsKernel, exact_w1_1d, exact_w1_grad_1d,
                       sinkhorn_w1, sinkhorn_w1_with_grad, solve_self_transport, w1_grad_atoms)

# large enough regularisation for tight finite differences
SMOOTH_CFG = SinkhornConfig(epsilon=0.5, tol=1e-12, max_iters=5000)


def test_exact_w1_small_cases():
    assert exact_w1_1d(EmpiricalDistribution([0.0, 1.0]), EmpiricalDistribution([1.0, 2.0])) == pytest.approx(1.0)
    assert exact_w1_1d(EmpiricalDistribution([3.0, 1.0]), EmpiricalDistribution([1.0, 3.0])) == 0.0


def test_exact_w1_needs_equal_counts():
    with pytest.raises(GridMismatchError):
        exact_w1_1d(EmpiricalDistribution([0.0, 1.0]), EmpiricalDistribution([1.0]))


@pytest.mark.parametrize('seed', range(5))
def test_exact_w1_matches_optimal_assignment(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, 9, size=7), rng.uniform(0, 9, size=7)
    cost = np.abs(x[:, None] - y[None, :])
    rows, cols = linear_sum_assignment(cost)
    expected = cost[rows, cols].mean()
    assert exact_w1_1d(EmpiricalDistribution(x), EmpiricalDistribution(y)) == pytest.approx(expected)


def test_exact_gradient_routes_through_the_sort():
    a = EmpiricalDistribution([2.0, 0.0, 5.0])
    b = EmpiricalDistribution([1.0, 3.0, 4.0])
    # sorted matching: 0->1, 2->3, 5->4
    np.testing.assert_allclose(exact_w1_grad_1d(a, b), np.array([-1.0, -1.0, 1.0]) / 3.0)


def test_schedule_anneals_down_to_epsilon():
    cfg = SinkhornConfig(epsilon=1e-4, eps_scaling_steps=10)
    levels = cfg.schedule(9.0)
    assert levels[0] == pytest.approx(9.0)
    assert levels[-1] == pytest.approx(1e-4)
    assert np.all(np.diff(levels) < 0)
    assert cfg.schedule(1e-6).tolist() == [1e-4]


@pytest.mark.parametrize('seed', range(5))
def test_sinkhorn_approaches_exact_w1(seed):
    rng = np.random.default_rng(100 + seed)
    x, y = rng.uniform(0, 9, size=15), rng.uniform(0, 9, size=15)
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=2000)
    exact = exact_w1_1d(EmpiricalDistribution(x), EmpiricalDistribution(y))
    assert sinkhorn_w1(x, y, cfg).cost == pytest.approx(exact, rel=1e-2, abs=5e-3)


def test_debiased_divergence_vanishes_on_identical_inputs():
    x = np.random.default_rng(3).uniform(0, 9, size=10)
    result = sinkhorn_w1(x, x, SMOOTH_CFG)
    assert abs(result.cost) < 1e-12
    assert result.converged


def test_sinkhorn_handles_unequal_sizes():
    rng = np.random.default_rng(4)
    result = sinkhorn_w1(rng.uniform(0, 1, size=5), rng.uniform(0, 1, size=8), SMOOTH_CFG)
    assert np.isfinite(result.cost)
    assert result.potential_f.shape == (5,)
    assert result.potential_g.shape == (8,)


@pytest.mark.parametrize('debiased', [False, True])
@pytest.mark.parametrize('seed', range(50))
def test_sinkhorn_gradient_matches_finite_differences(debiased, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, 3, size=6), rng.uniform(0, 3, size=6)
    cfg = SinkhornConfig(epsilon=0.5, tol=1e-12, max_iters=5000, debiased=debiased)
    _, grad = sinkhorn_w1_with_grad(x, y, cfg)
    h = 1e-4
    numeric = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (sinkhorn_w1(up, y, cfg).cost - sinkhorn_w1(down, y, cfg).cost) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_grad_atoms_raises_when_not_converged():
    rng = np.random.default_rng(9)
    cfg = SinkhornConfig(epsilon=1.0, max_iters=1, eps_scaling_steps=1)
    with pytest.raises(TransportNotConverged):
        w1_grad_atoms(rng.uniform(0, 5, size=6), rng.uniform(0, 5, size=6), cfg)


def test_invalid_inputs():
    with pytest.raises(InvalidArgumentError):
        SinkhornConfig(epsilon=0.0)
    with pytest.raises(InvalidArgumentError):
        sinkhorn_w1(np.array([]), np.array([1.0]))


@pytest.mark.parametrize('seed', range(4))
def test_kernel_matches_dense_logsumexp(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, 9, size=11), rng.uniform(0, 9, size=7)
    y[2] = x[4]
    h, eps = rng.normal(size=7), 0.3
    dense = logsumexp(h[None, :] - np.abs(x[:, None] - y[None, :]) / eps, axis=1)
    np.testing.assert_allclose(_AbsKernel(x, y).logsumexp(h, eps), dense, rtol=1e-10, atol=1e-10)
    lower, upper = _AbsKernel(x, y).split_logsumexp(h, eps)
    terms = np.exp(h[None, :] - np.abs(x[:, None] - y[None, :]) / eps)
    np.testing.assert_allclose(np.exp(lower), (terms * (y[None, :] < x[:, None])).sum(axis=1), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(np.exp(upper), (terms * (y[None, :] > x[:, None])).sum(axis=1), rtol=1e-10, atol=1e-14)


def test_level_budget_is_loose_above_the_target():
    cfg = SinkhornConfig(tol=1e-9, max_iters=5000, level_tol=1e-3, level_max_iters=50)
    assert cfg.level_budget(final=False) == (1e-3, 50)
    assert cfg.level_budget(final=True) == (1e-9, 5000)


def test_solution_reports_the_target_epsilon():
    cfg = SinkhornConfig(epsilon=1e-3, eps_scaling_steps=8)
    assert solve_self_transport(np.array([0.0, 2.0, 5.0]), cfg).epsilon == pytest.approx(1e-3)


def test_default_config_single_atoms():
    result = sinkhorn_w1(np.array([0.0]), np.array([1.0]))
    assert result.cost == pytest.approx(1.0, rel=1e-2)
    assert result.converged


def test_default_config_matches_exact_w1_at_n128():
    rng = np.random.default_rng(128)
    x, y = rng.uniform(0, 9, size=128), rng.uniform(0, 9, size=128)
    exact = exact_w1_1d(EmpiricalDistribution(x), EmpiricalDistribution(y))
    assert sinkhorn_w1(x, y).cost == pytest.approx(exact, rel=1e-2)


@pytest.mark.acceptance
def test_default_config_on_200_random_pairs_within_a_minute():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors = []
    for _ in range(200):
        n = int(rng.integers(1, 257))
        x, y = rng.uniform(0, 9, size=n), rng.uniform(0, 9, size=n)
        exact = exact_w1_1d(EmpiricalDistribution(x), EmpiricalDistribution(y))
        errors.append(abs(sinkhorn_w1(x, y).cost - exact) / exact)
    elapsed = time.perf_counter() - start
    assert max(errors) <= 1e-2
    assert elapsed <= 60.0
