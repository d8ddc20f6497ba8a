import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amdp_lab.core import (
    Policy,
    Regularizer,
    TabularAmdp,
    average_cost,
    bellman_residuals,
    differential_values,
    induced_state_action_kernel,
    induced_state_kernel,
    kl_rows,
    mixing_bound_check,
    mixing_gap,
    mixing_time,
    performance_difference,
    policy_gradient,
    solve_optimal,
    stationary_distribution,
)
from amdp_lab.errors import AssumptionViolated, DimensionMismatch, DomainError, ModelValidationError
from amdp_lab.lab import RandomMdpSpec, generate_random_mdp


def rand_mdp(seed, n_states=6, n_actions=3, temperature=1.0):
    return generate_random_mdp(RandomMdpSpec(n_states, n_actions, 0.5, (0.0, 10.0), temperature, seed))


def rand_policy(rng, n_states, n_actions):
    return Policy(rng.dirichlet(np.ones(n_actions), size=n_states))


CHAIN = np.array([[0.9, 0.1], [0.2, 0.8]])


# ---- model validation -------------------------------------------------------

def test_model_rejects_bad_rows_and_reports_first():
    kernel = np.full((3, 2, 3), 1 / 3)
    kernel[1, 0] = [0.5, 0.3, 0.1]
    with pytest.raises(ModelValidationError, match=r"s=1, a=0"):
        TabularAmdp(kernel, np.zeros((3, 2)))
    kernel[1, 0] = [1.2, -0.1, -0.1]
    with pytest.raises(ModelValidationError, match="negative"):
        TabularAmdp(kernel, np.zeros((3, 2)))


def test_model_round_trip(tmp_path):
    mdp = rand_mdp(0)
    mdp.save(tmp_path / "m.json")
    back = TabularAmdp.load(tmp_path / "m.json")
    assert np.array_equal(back.kernel, mdp.kernel) and np.array_equal(back.cost, mdp.cost)
    assert back.cost_bound == mdp.cost_bound


def test_policy_shape_mismatch():
    mdp = rand_mdp(0)
    with pytest.raises(DimensionMismatch):
        induced_state_kernel(mdp, Policy.uniform(5, 3))


# ---- induced kernels --------------------------------------------------------

def test_state_kernel_deterministic_policy_picks_rows():
    mdp = rand_mdp(1)
    acts = [0, 2, 1, 1, 0, 2]
    p = induced_state_kernel(mdp, Policy.deterministic(acts, 3))
    for s, a in enumerate(acts):
        assert np.array_equal(p[s], mdp.kernel[s, a])


def test_state_kernel_symmetric_two_actions():
    kernel = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]])
    p = induced_state_kernel(TabularAmdp(kernel, np.zeros((2, 2))), Policy.uniform(2, 2))
    assert np.allclose(p, 0.5)


def test_state_kernel_matches_triple_loop():
    rng = np.random.default_rng(0)
    mdp = rand_mdp(2, 5, 3)
    pi = rand_policy(rng, 5, 3)
    brute = np.zeros((5, 5))
    for s, a, t in itertools.product(range(5), range(3), range(5)):
        brute[s, t] += pi.probs[s, a] * mdp.kernel[s, a, t]
    assert np.allclose(induced_state_kernel(mdp, pi), brute, atol=1e-15)


def test_state_action_kernel_single_state():
    pi = Policy(np.array([[0.2, 0.3, 0.5]]))
    mdp = TabularAmdp(np.ones((1, 3, 1)), np.zeros((1, 3)))
    big = induced_state_action_kernel(mdp, pi)
    assert np.allclose(big, np.tile(pi.probs, (3, 1)))


def test_state_action_kernel_deterministic_is_zero_one():
    kernel = np.zeros((3, 2, 3))
    for s, a in itertools.product(range(3), range(2)):
        kernel[s, a, (s + a + 1) % 3] = 1.0
    big = induced_state_action_kernel(TabularAmdp(kernel, np.zeros((3, 2))),
                                      Policy.deterministic([1, 0, 1], 2))
    assert set(np.unique(big)) <= {0.0, 1.0}
    assert np.all(big.sum(axis=1) == 1.0)


def test_state_action_kernel_matches_brute_force():
    rng = np.random.default_rng(1)
    mdp = rand_mdp(3, 4, 3)
    pi = rand_policy(rng, 4, 3)
    brute = np.zeros((12, 12))
    for s, a, t, b in itertools.product(range(4), range(3), range(4), range(3)):
        brute[s * 3 + a, t * 3 + b] = mdp.kernel[s, a, t] * pi.probs[t, b]
    assert np.allclose(induced_state_action_kernel(mdp, pi), brute, atol=1e-15)


# ---- stationary distribution and mixing -------------------------------------

def test_stationary_doubly_stochastic_is_uniform():
    p = np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]])
    assert np.allclose(stationary_distribution(p), 1 / 3)


def test_stationary_two_state_chain():
    # balance: 0.1 nu0 = 0.2 nu1
    assert np.allclose(stationary_distribution(CHAIN), [2 / 3, 1 / 3], atol=1e-14)


def test_stationary_matches_power_iteration():
    rng = np.random.default_rng(2)
    mdp = rand_mdp(4, 10, 3)
    p = induced_state_kernel(mdp, rand_policy(rng, 10, 3))
    power = np.linalg.matrix_power(p, 2000)[0]
    assert np.allclose(stationary_distribution(p), power, atol=1e-12)


def test_stationary_rejects_multichain():
    with pytest.raises(AssumptionViolated):
        stationary_distribution(np.eye(3))


def test_mixing_uniform_kernel_is_one():
    assert mixing_time(np.full((4, 4), 0.25)) == 1


def test_mixing_two_state_chain_by_powers():
    nu = np.array([2 / 3, 1 / 3])
    expected = next(t for t in range(1, 100)
                    if np.abs(np.linalg.matrix_power(CHAIN, t) - nu).sum(axis=1).max() <= 0.5)
    t_mix = mixing_time(CHAIN)
    assert t_mix == expected
    assert mixing_bound_check(CHAIN, nu, 3 * t_mix)
    assert mixing_gap(CHAIN, nu, 3 * t_mix) <= 0.125


def test_mixing_cap_raises():
    slow = np.array([[1 - 1e-7, 1e-7], [1e-7, 1 - 1e-7]])
    with pytest.raises(AssumptionViolated):
        mixing_time(slow, t_max=50)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mixing_bound_property(seed):
    rng = np.random.default_rng(seed)
    mdp = rand_mdp(seed, 6, 3)
    p = induced_state_kernel(mdp, rand_policy(rng, 6, 3))
    nu = stationary_distribution(p)
    assert np.abs(nu @ p - nu).sum() <= 1e-10
    t = mixing_time(p, nu)
    for mult in (1, 2, 5):
        assert mixing_bound_check(p, nu, mult * t, t)


# ---- average cost and differential values -----------------------------------

def test_average_cost_constant():
    mdp = TabularAmdp(rand_mdp(0).kernel, np.full((6, 3), 2.5))
    assert average_cost(mdp, Policy.uniform(6, 3)) == pytest.approx(2.5, abs=1e-14)


def test_average_cost_uniform_kernel():
    mdp = TabularAmdp(np.full((2, 2, 2), 0.5), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert average_cost(mdp, Policy.uniform(2, 2)) == pytest.approx(0.5, abs=1e-15)


def test_average_cost_entropy_matches_rollout():
    mdp = rand_mdp(5, 4, 3)
    pi = Policy.uniform(4, 3)
    reg = Regularizer("negative_entropy", 0.7)
    rho = average_cost(mdp, pi, reg)
    # uniform policy: h = -omega log|A| in every state
    assert rho == pytest.approx(average_cost(mdp, pi) - 0.7 * np.log(3), abs=1e-12)
    rng = np.random.default_rng(0)
    s, total, n = 0, 0.0, 1_000_000
    cum = np.cumsum(mdp.kernel, axis=2)
    acts = rng.integers(3, size=n)
    u = rng.random(n)
    for t in range(n):
        a = acts[t]
        total += mdp.cost[s, a]
        s = min(int(np.searchsorted(cum[s, a], u[t], side="right")), 3)
    assert total / n - 0.7 * np.log(3) == pytest.approx(rho, abs=0.02)


def test_differential_values_constant_cost_zero():
    mdp = TabularAmdp(rand_mdp(1).kernel, np.full((6, 3), 3.0))
    assert np.abs(differential_values(mdp, Policy.uniform(6, 3)).q_bar).max() < 1e-12


def test_differential_values_uniform_kernel_one_step():
    cost = np.array([[0.0, 1.0], [2.0, 5.0]])
    mdp = TabularAmdp(np.full((2, 2, 2), 0.5), cost)
    dv = differential_values(mdp, Policy.uniform(2, 2))
    assert dv.rho == pytest.approx(2.0)
    assert np.allclose(dv.q_bar, cost - 2.0, atol=1e-14)


def test_differential_values_series_oracle():
    rng = np.random.default_rng(3)
    mdp = rand_mdp(6)
    pi = rand_policy(rng, 6, 3)
    reg = Regularizer("negative_entropy", 0.3)
    dv = differential_values(mdp, pi, reg)
    p_sa = induced_state_action_kernel(mdp, pi)
    r = (mdp.cost + reg.value(pi)[:, None]).reshape(-1) - dv.rho
    series, term = np.zeros_like(r), r.copy()
    for _ in range(501):
        series += term
        term = p_sa @ term
    assert np.abs(series - dv.q_flat).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), omega=st.sampled_from([0.0, 0.5, 2.0]))
def test_bellman_and_anchoring(seed, omega):
    rng = np.random.default_rng(seed)
    mdp = rand_mdp(seed)
    pi = rand_policy(rng, 6, 3)
    reg = Regularizer("negative_entropy", omega) if omega else None
    dv = differential_values(mdp, pi, reg)
    assert max(bellman_residuals(mdp, pi, dv, reg)) <= 1e-10
    assert abs(((dv.nu[:, None] * pi.probs) * dv.q_bar).sum()) <= 1e-10


# ---- gradient and performance difference ------------------------------------

def test_gradient_constant_cost_zero():
    mdp = TabularAmdp(rand_mdp(2).kernel, np.ones((6, 3)))
    assert np.abs(policy_gradient(mdp, Policy.uniform(6, 3))).max() < 1e-12


def test_gradient_rejects_boundary_with_entropy():
    mdp = rand_mdp(2)
    with pytest.raises(DomainError):
        policy_gradient(mdp, Policy.deterministic([0] * 6, 3), Regularizer("negative_entropy", 1.0))


@pytest.mark.parametrize("omega", [0.0, 0.5])
def test_gradient_matches_finite_differences(omega):
    rng = np.random.default_rng(4)
    mdp = rand_mdp(7, 4, 3)
    reg = Regularizer("negative_entropy", omega) if omega else None
    pi = rand_policy(rng, 4, 3).probs
    grad = policy_gradient(mdp, pi, reg)
    for _ in range(5):
        direction = rng.normal(size=pi.shape)
        direction -= direction.mean(axis=1, keepdims=True)
        h = 1e-5
        fd = (average_cost(mdp, pi + h * direction, reg) - average_cost(mdp, pi - h * direction, reg)) / (2 * h)
        exact = float((grad * direction).sum())
        assert fd == pytest.approx(exact, rel=1e-6, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_performance_difference_property(seed):
    rng = np.random.default_rng(seed)
    mdp = rand_mdp(seed)
    reg = Regularizer("negative_entropy", 0.4)
    p, q = rand_policy(rng, 6, 3), rand_policy(rng, 6, 3)
    lhs = average_cost(mdp, q, reg) - average_cost(mdp, p, reg)
    assert abs(lhs - performance_difference(mdp, p, q, reg)) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_generalized_monotonicity(seed):
    rng = np.random.default_rng(seed)
    mdp = rand_mdp(seed % 50, 5, 3)
    pi_star, _ = solve_optimal(mdp)
    nu_star = differential_values(mdp, pi_star).nu
    pi = rand_policy(rng, 5, 3)
    q = differential_values(mdp, pi).q_bar
    assert float(nu_star @ (q * (pi.probs - pi_star.probs)).sum(axis=1)) >= -1e-8


# ---- optimal policy ---------------------------------------------------------

def test_solve_optimal_dominant_action():
    base = rand_mdp(8, 5, 3)
    kernel = np.repeat(base.kernel[:, :1, :], 3, axis=1)
    cost = np.tile([3.0, 1.0, 2.0], (5, 1)) + np.arange(5)[:, None]
    pi_star, rho = solve_optimal(TabularAmdp(kernel, cost))
    assert np.array_equal(pi_star.probs.argmax(axis=1), np.ones(5, int))
    assert np.allclose(pi_star.probs.max(axis=1), 1.0)


def test_solve_optimal_matches_enumeration():
    for seed in range(5):
        mdp = rand_mdp(seed, 2, 2)
        best = min(average_cost(mdp, Policy.deterministic(c, 2)) for c in itertools.product(range(2), repeat=2))
        _, rho = solve_optimal(mdp)
        assert rho == pytest.approx(best, abs=1e-9)


def test_solve_optimal_entropy_tends_to_uniform():
    mdp = rand_mdp(9, 4, 3)
    uniform = np.full((4, 3), 1 / 3)
    kls = []
    for omega in (1.0, 10.0, 100.0):
        pi, _ = solve_optimal(mdp, Regularizer("negative_entropy", omega))
        kls.append(kl_rows(pi.probs, uniform).max())
    assert kls[0] > kls[1] > kls[2] and kls[2] < 1e-3
