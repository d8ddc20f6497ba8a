"""Policy evaluation: multiple-trajectory (generative), VRTD and EVRTD (Markovian).

All critics estimate the average cost and the differential Q-function of the
policy that drives their sampler. ``extra_cost`` is an optional per-state
addition to the sampled cost (the regularizer value h^pi(s), which the actor
knows in closed form).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import TabularAmdp, as_probs, induced_state_action_kernel, induced_state_kernel
from .errors import Divergence, InvalidPerturbation
from .features import FeatureMap, ProjectedModel, best_linf_shift
from .samplers import CHUNK, GenerativeOracle, TrajectorySimulator, alias_tables, draw_actions, row_cdf


def _ceil(x: float) -> int:
    # guards against ceil(2.0000000000000004) = 3 from rounding in the schedule formulas
    return int(math.ceil(x * (1.0 - 1e-12)))


@dataclass(frozen=True)
class MultiTrajConfig:
    T: int
    T_prime: int
    M: int = 1
    M_prime: int = 1

    def __post_init__(self):
        for name in ("T", "T_prime", "M", "M_prime"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def check_mixing(self, t_mix: int) -> None:
        if min(self.T, self.T_prime) <= t_mix + 1:
            warnings.warn(f"trajectory lengths ({self.T}, {self.T_prime}) do not exceed t_mix + 1 = {t_mix + 1}",
                          stacklevel=2)

    def queries(self, n_states: int, n_actions: int) -> int:
        return self.M * self.T + n_states * n_actions * self.M_prime * self.T_prime


@dataclass(frozen=True)
class VrtdConfig:
    eta: float
    t_inner: int
    n_k: tuple
    n_prime_k: tuple
    tau: int = 1
    tau_prime: int = 1
    underline_pi: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "n_k", tuple(int(n) for n in self.n_k))
        object.__setattr__(self, "n_prime_k", tuple(int(n) for n in self.n_prime_k))
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if len(self.n_k) != len(self.n_prime_k) or not self.n_k:
            raise ValueError("n_k and n_prime_k must be nonempty with equal length K")
        if self.t_inner < 1 or min(self.n_k) < 1 or min(self.n_prime_k) < 1:
            raise ValueError("t_inner and batch sizes must be >= 1")
        if self.tau < 0 or self.tau_prime < 0:
            raise ValueError("skip lengths must be >= 0")

    @property
    def k_epochs(self) -> int:
        return len(self.n_k)

    @classmethod
    def constant(cls, eta, t_inner, n, n_prime, k_epochs, tau=1, tau_prime=1, underline_pi=None):
        return cls(eta, t_inner, (n,) * k_epochs, (n_prime,) * k_epochs, tau, tau_prime, underline_pi)

    def total_samples(self) -> int:
        """Transitions consumed: (tau'+1)(N_k + N'_k) + (tau+1) T per epoch."""
        return sum((self.tau_prime + 1) * (n + n2) + (self.tau + 1) * self.t_inner
                   for n, n2 in zip(self.n_k, self.n_prime_k))


def default_tau(t_mix: float, tol: float | None = None) -> int:
    if tol is None:
        return max(1, _ceil(3 * t_mix))
    return max(1, _ceil(t_mix * math.log2(1.0 / tol)))


def vrtd_default_schedule(one_minus_beta: float, mu: float, t_mix: float, K: int, N: int, N_prime: int,
                          tol: float | None = None, underline_pi: float | None = None) -> VrtdConfig:
    """Geometric batch schedule with the step size and inner length of the error theorem."""
    eta = one_minus_beta / 845.0
    t_inner = _ceil(64.0 / (mu * one_minus_beta * eta))
    floor = _ceil(1160.0 / (mu * one_minus_beta**2))
    n_k = [max(floor, _ceil(0.75 ** (K - k) * N)) for k in range(1, K + 1)]
    n_prime_k = [max(1, _ceil(0.75 ** (K - k) * N_prime)) for k in range(1, K + 1)]
    tau = default_tau(t_mix, tol)
    return VrtdConfig(eta, t_inner, n_k, n_prime_k, tau, tau, underline_pi)


def vrtd_fixed_schedule(one_minus_beta: float, mu: float, t_mix: float, K: int, N: int | None = None,
                        N_prime: int | None = None, tol: float | None = None,
                        underline_pi: float | None = None) -> VrtdConfig:
    """Constant batches N_k = N, N'_k = N' (the bias theorem), clamped to their lower bounds."""
    eta = one_minus_beta / 845.0
    t_inner = _ceil(64.0 / (mu * one_minus_beta * eta))
    n = max(_ceil(1160.0 / (mu * one_minus_beta**2)), N or 0)
    n2 = max(_ceil(1.0 / (mu * one_minus_beta**2)), N_prime or 0)
    tau = default_tau(t_mix, tol)
    return VrtdConfig.constant(eta, t_inner, n, n2, K, tau, tau, underline_pi)


@dataclass
class EpochRecord:
    epoch: int
    theta: np.ndarray
    rho: float
    samples_used: int
    d_norm_error: float | None = None
    linf_error: float | None = None


@dataclass
class CriticOutput:
    rho_hat: float
    samples_used: int
    q_hat: np.ndarray | None = None  # (S, A) table for tabular critics
    theta: np.ndarray | None = None
    features: FeatureMap | None = None
    trace: list = field(default_factory=list)
    perturbed: bool = False

    def q_table(self, n_states: int | None = None, n_actions: int | None = None) -> np.ndarray:
        if self.q_hat is not None:
            return self.q_hat
        q = self.features.psi @ self.theta
        return q.reshape(n_states, n_actions) if n_states else q


# ---------------------------------------------------------------- generative


def _traj_costs(oracle: GenerativeOracle, pi_cdf, s, a, steps, extra, rng, record):
    """Advance vectorized trajectories ``steps`` transitions; ``record(t, s, a, cost)`` per time."""
    mdp = oracle.mdp
    for t in range(steps + 1):
        record(t, s, a, mdp.cost[s, a] + extra[s])
        if t < steps:
            s, _ = oracle.query_batch(s, a)
            a = draw_actions(pi_cdf, s, rng)


def multiple_trajectory_evaluate(oracle: GenerativeOracle, pi, cfg: MultiTrajConfig, seed=None,
                                 extra_cost=None, init_dist=None) -> CriticOutput:
    """Generative-model estimator.

    rho_hat averages the terminal cost c(s_T, a_T) of M trajectories of length
    T + 1; Q_hat(s, a) averages sum_{t <= T'} (c_t - rho_hat) over M' trajectories
    started at (s, a). Actions are drawn from the critic's own generator; the
    oracle's generator drives transitions.
    """
    mdp = oracle.mdp
    probs = as_probs(pi)
    rng = np.random.default_rng(seed)
    pi_cdf = row_cdf(probs)
    extra = np.zeros(mdp.n_states) if extra_cost is None else np.asarray(extra_cost, float)
    start_queries = oracle.queries

    p0 = np.full(mdp.n_states, 1.0 / mdp.n_states) if init_dist is None else np.asarray(init_dist, float)
    s0 = np.minimum((rng.random(cfg.M)[:, None] >= row_cdf(p0)).sum(axis=1), mdp.n_states - 1)
    a0 = draw_actions(pi_cdf, s0, rng)
    terminal = np.zeros(cfg.M)

    def rec_rho(t, s, a, c):
        if t == cfg.T:
            terminal[:] = c

    _traj_costs(oracle, pi_cdf, s0, a0, cfg.T, extra, rng, rec_rho)
    rho_hat = float(terminal.mean())

    n_sa = mdp.n_pairs
    s1 = np.repeat(np.repeat(np.arange(mdp.n_states), mdp.n_actions), cfg.M_prime)
    a1 = np.repeat(np.tile(np.arange(mdp.n_actions), mdp.n_states), cfg.M_prime)
    totals = np.zeros(n_sa * cfg.M_prime)

    def rec_q(t, s, a, c):
        totals[:] += c - rho_hat

    _traj_costs(oracle, pi_cdf, s1, a1, cfg.T_prime, extra, rng, rec_q)
    q_hat = totals.reshape(n_sa, cfg.M_prime).mean(axis=1).reshape(mdp.n_states, mdp.n_actions)
    return CriticOutput(rho_hat=rho_hat, samples_used=oracle.queries - start_queries, q_hat=q_hat)


def expected_rho_hat(mdp: TabularAmdp, pi, T: int, init_dist=None, extra_cost=None) -> float:
    """Exact E[rho_hat] of the terminal-cost estimator by propagating the start distribution."""
    probs = as_probs(pi)
    p = induced_state_kernel(mdp, probs)
    dist = np.full(mdp.n_states, 1.0 / mdp.n_states) if init_dist is None else np.asarray(init_dist, float)
    dist = dist @ np.linalg.matrix_power(p, T)
    c_pi = (probs * mdp.cost).sum(axis=1)
    if extra_cost is not None:
        c_pi = c_pi + extra_cost
    return float(dist @ c_pi)


def expected_q_hat(mdp: TabularAmdp, pi, T_prime: int, rho_hat: float, extra_cost=None) -> np.ndarray:
    """Exact E[Q_hat | rho_hat] = sum_{t <= T'} (P^pi)^t c - (T'+1) rho_hat."""
    probs = as_probs(pi)
    p_sa = induced_state_action_kernel(mdp, probs)
    c = mdp.cost + (0.0 if extra_cost is None else np.asarray(extra_cost)[:, None])
    v = c.reshape(-1).copy()
    total = v.copy()
    for _ in range(T_prime):
        v = p_sa @ v
        total += v
    return (total - (T_prime + 1) * rho_hat).reshape(mdp.n_states, mdp.n_actions)


# ---------------------------------------------------------------- perturbation


@dataclass(frozen=True, eq=False)
class PerturbedPolicy:
    pi_tilde: np.ndarray
    active: np.ndarray  # bool (S, A): membership in A_s
    alpha: float

    @property
    def needed(self) -> bool:
        return not bool(self.active.all())

    @property
    def min_active(self) -> int:
        return int(self.active.sum(axis=1).min())


def construct_perturbed_policy(pi, underline_pi: float) -> PerturbedPolicy:
    """Lift every action outside A_s = {a : pi(a|s) > underline_pi / 2} to underline_pi.

    Mass on A_s is rescaled by (1 - (|A| - |A_s|) underline_pi) / sum_{A_s} pi.
    alpha = 1 - (|A| - min_s |A_s|) underline_pi.
    """
    probs = as_probs(pi)
    n_actions = probs.shape[1]
    active = probs > underline_pi / 2.0
    k = active.sum(axis=1)
    if (k == n_actions).all():
        return PerturbedPolicy(probs.copy(), active, 1.0)
    if underline_pi <= 0 or underline_pi > 1.0 / (n_actions - k.min()):
        raise InvalidPerturbation(
            f"underline_pi={underline_pi} must lie in (0, 1/{n_actions - k.min()}]")
    mass = np.where(active, probs, 0.0).sum(axis=1)
    scale = (1.0 - (n_actions - k) * underline_pi) / mass
    tilde = np.where(active, probs * scale[:, None], underline_pi)
    alpha = 1.0 - (n_actions - k.min()) * underline_pi
    return PerturbedPolicy(tilde, active, float(alpha))


def underline_pi_bound(one_minus_beta: float, nu_min: float, n_actions: int, min_As: int) -> float | None:
    """Largest perturbation level with the guaranteed monotonicity floor; None if no perturbation is needed."""
    if min_As >= n_actions:
        return None
    x = one_minus_beta * nu_min
    return x / ((n_actions - min_As) * (8.0 + x))


def alpha_of(underline_pi: float, n_actions: int, min_As: int) -> float:
    return 1.0 - (n_actions - min_As) * underline_pi


# ---------------------------------------------------------------- VRTD / EVRTD


def _oracle_errors(model: ProjectedModel | None, psi, theta):
    if model is None:
        return None, None
    _, linf = best_linf_shift(psi @ theta - model.q_bar)
    return model.d_norm_sq(psi, theta), linf


def _vrtd(sim: TrajectorySimulator, features: FeatureMap, cfg: VrtdConfig, theta0, pi_tilde,
          extra_cost, model) -> CriticOutput:
    psi = np.ascontiguousarray(features.psi)
    n_actions = sim.n_actions
    cost = sim.mdp.cost + (0.0 if extra_cost is None else np.asarray(extra_cost, float)[:, None])
    cost = cost.reshape(-1)
    perturb = pi_tilde is not None
    rq, ra = alias_tables(pi_tilde) if perturb else (sim.pq, sim.pa)
    theta_hat = np.array(theta0, dtype=float)
    start = sim.steps
    trace = []
    rho_tilde = 0.0
    for k in range(cfg.k_epochs):
        # step 4: average cost from N'_k skipped samples under pi
        rho_s = sim.sample_tuples(cfg.n_prime_k[k], cfg.tau_prime)
        rho_tilde = float(cost[rho_s[:, 0] * n_actions + rho_s[:, 1]].mean())
        # step 5: anchor operator at theta_tilde
        theta_tilde = theta_hat.copy()
        g_s = sim.sample_tuples(cfg.n_k[k], cfg.tau_prime, pi_tilde)
        i0 = g_s[:, 0] * n_actions + g_s[:, 1]
        i1 = g_s[:, 2] * n_actions + g_s[:, 3]
        scal = (psi[i0] - psi[i1]) @ theta_tilde - cost[i0] + rho_tilde
        ghat = (scal[:, None] * psi[i0]).mean(axis=0)
        if not np.all(np.isfinite(ghat)):
            raise Divergence(f"anchor operator is not finite (eta={cfg.eta}, epoch={k + 1}, step=0)")
        # steps 6-8: inner loop
        theta = theta_tilde.copy()
        acc = np.zeros_like(theta)
        per = sim._uniforms_per_tuple(cfg.tau, perturb)
        block = max(1, CHUNK // (cfg.tau + 1))
        done = 0
        while done < cfg.t_inner:
            m = min(block, cfg.t_inner - done)
            u = sim.rng.random(per * m)
            s, a, bad = _kernels.vrtd_inner(psi, n_actions, sim.state, sim.action, sim.kq, sim.ka, sim.pq,
                                            sim.pa, rq, ra, perturb, u, cfg.tau, m, cfg.eta, theta,
                                            theta_tilde, ghat, acc)
            sim.state, sim.action = int(s), int(a)
            if bad >= 0 or not np.all(np.isfinite(theta)):
                step = done + max(bad, 0) + 1
                raise Divergence(f"VRTD iterate is not finite (eta={cfg.eta}, epoch={k + 1}, step={step})")
            done += m
        sim.steps += cfg.t_inner * (cfg.tau + 1)
        theta_hat = acc / cfg.t_inner
        d_err, linf = _oracle_errors(model, psi, theta_hat)
        trace.append(EpochRecord(k + 1, theta_hat.copy(), rho_tilde, sim.steps - start, d_err, linf))
    return CriticOutput(rho_hat=rho_tilde, samples_used=sim.steps - start, theta=theta_hat,
                        features=features, trace=trace, perturbed=perturb)


def vrtd_run(sim: TrajectorySimulator, features: FeatureMap, cfg: VrtdConfig, theta0=None,
             extra_cost=None, model: ProjectedModel | None = None) -> CriticOutput:
    """Variance-reduced TD on the simulator's single trajectory.

    Per epoch: rho from N'_k skipped costs, an anchor operator from N_k skipped
    tuples at theta_tilde, then T inner steps
    theta <- theta - eta (<psi - psi', theta - theta_tilde> psi + g_hat);
    the epoch output is the average of the T inner iterates. ``model`` only adds
    oracle errors to the trace.
    """
    theta0 = np.zeros(features.d) if theta0 is None else theta0
    return _vrtd(sim, features, cfg, theta0, None, extra_cost, model)


def evrtd_run(sim: TrajectorySimulator, features: FeatureMap, cfg: VrtdConfig, theta0=None,
              extra_cost=None, model: ProjectedModel | None = None,
              underline_pi: float | None = None) -> CriticOutput:
    """VRTD whose operator samples record actions from the perturbed policy.

    Identical to ``vrtd_run`` (same random stream, same output) when every action
    of the behaviour policy already has probability above underline_pi / 2.
    """
    level = cfg.underline_pi if underline_pi is None else underline_pi
    if level is None:
        raise InvalidPerturbation("EVRTD needs underline_pi (config field or argument)")
    pert = construct_perturbed_policy(sim.probs, level)
    theta0 = np.zeros(features.d) if theta0 is None else theta0
    if not pert.needed:
        return _vrtd(sim, features, cfg, theta0, None, extra_cost, model)
    return _vrtd(sim, features, cfg, theta0, pert.pi_tilde, extra_cost, model)


# ---------------------------------------------------------------- diagnostics


@dataclass(frozen=True)
class ErrorReport:
    varsigma: float
    sigma_sq: float
    kappa_sq: float
    per_run: np.ndarray  # min_b ||Q_hat + b - Q_bar||_inf per run


def critic_error_report(q_hats, q_bar) -> ErrorReport:
    """Bias, mean squared error and magnitude of critic outputs modulo constants.

    ``q_hats`` holds one flattened estimate per replica; the bias uses their mean
    as the estimate of E[Q_hat].
    """
    q = np.atleast_2d(np.asarray(q_hats, float))
    q_bar = np.asarray(q_bar, float).reshape(-1)
    q = q.reshape(q.shape[0], -1)
    per_run = np.array([best_linf_shift(row - q_bar)[1] for row in q])
    mags = np.array([best_linf_shift(row)[1] for row in q])
    _, bias = best_linf_shift(q.mean(axis=0) - q_bar)
    return ErrorReport(varsigma=bias, sigma_sq=float(np.mean(per_run**2)),
                       kappa_sq=float(np.mean(mags**2)), per_run=per_run)
