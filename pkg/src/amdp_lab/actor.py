"""Stochastic policy mirror descent with KL prox steps and pluggable critics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LOG_FLOOR,
    NO_REG,
    Regularizer,
    TabularAmdp,
    as_probs,
    average_cost,
    differential_values,
    kl_rows,
    stationary_distribution,
    induced_state_kernel,
)
from .critics import (
    MultiTrajConfig,
    VrtdConfig,
    construct_perturbed_policy,
    evrtd_run,
    multiple_trajectory_evaluate,
    vrtd_run,
)
from .errors import Divergence
from .features import FeatureMap
from .samplers import GenerativeOracle, TrajectorySimulator


def kl_prox_update(pi_k, q_hat, lam: float, reg: Regularizer | None = None) -> np.ndarray:
    """argmin_p lam [<q, p> + h^p(s)] + KL(p || pi_k(.|s)) for every state, in closed form."""
    reg = reg or NO_REG
    probs = as_probs(pi_k)
    q_hat = np.asarray(q_hat, float).reshape(probs.shape)
    logits = np.log(np.maximum(probs, LOG_FLOOR)) - lam * q_hat
    if reg.active:
        if reg.kind == "kl_to_reference":
            logits = logits + lam * reg.omega * np.log(np.maximum(reg.reference.probs, LOG_FLOOR))
        logits = logits / (1.0 + lam * reg.omega)
    if not np.all(np.isfinite(logits)):
        raise Divergence("non-finite logits in the prox update")
    logits = logits - logits.max(axis=1, keepdims=True)
    new = np.exp(logits)
    new = np.maximum(new, LOG_FLOOR)
    return new / new.sum(axis=1, keepdims=True)


def three_point_gap(pi_k, pi_next, q_hat, lam: float, reg: Regularizer | None, p) -> np.ndarray:
    """Per-state slack of the prox three-point inequality; nonnegative up to rounding.

    RHS - LHS of lam [<q, pi_next - p> + h^{pi_next} - h^p] + KL(pi_next || pi_k)
    <= KL(p || pi_k) - (1 + lam omega) KL(p || pi_next).
    """
    reg = reg or NO_REG
    pk, pn, p = as_probs(pi_k), as_probs(pi_next), as_probs(p)
    lhs = lam * ((q_hat * (pn - p)).sum(axis=1) + reg.value(pn) - reg.value(p)) + kl_rows(pn, pk)
    rhs = kl_rows(p, pk) - (1.0 + lam * reg.omega) * kl_rows(p, pn)
    return rhs - lhs


def policy_distance(pi, pi_star, nu_star) -> float:
    """D(pi, pi*) = E_{s ~ nu*}[KL(pi*(.|s) || pi(.|s))]."""
    return float(np.asarray(nu_star) @ kl_rows(as_probs(pi_star), as_probs(pi)))


def vi_residual(mdp: TabularAmdp, reg: Regularizer | None, pi, pi_star, nu_star=None) -> float:
    """E_{s ~ nu*}[<Q^{pi*}(s,.), pi - pi*> + h^pi(s) - h^{pi*}(s)]; >= -tol when pi* is optimal."""
    reg = reg or NO_REG
    p, ps = as_probs(pi), as_probs(pi_star)
    dv = differential_values(mdp, ps, reg)
    nu_star = dv.nu if nu_star is None else nu_star
    return float(nu_star @ ((dv.q_bar * (p - ps)).sum(axis=1) + reg.value(p) - reg.value(ps)))


def monotone_residual(mdp: TabularAmdp, reg: Regularizer | None, pi, pi_star, nu_star=None) -> float:
    """E_{s ~ nu*}[<Q^pi(s,.), pi - pi*> + h^pi(s) - h^{pi*}(s)]; equals (rho(pi) - rho*) x positive weight."""
    reg = reg or NO_REG
    p, ps = as_probs(pi), as_probs(pi_star)
    dv = differential_values(mdp, p, reg)
    if nu_star is None:
        nu_star = stationary_distribution(induced_state_kernel(mdp, ps))
    return float(nu_star @ ((dv.q_bar * (p - ps)).sum(axis=1) + reg.value(p) - reg.value(ps)))


# ---------------------------------------------------------------- step sizes


def stepsize_thm3(kappa: float, K: int, n_actions: int) -> float:
    """Constant step sqrt(2 log|A|) / (kappa sqrt(K)) for the unregularized problem."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return math.sqrt(2.0 * math.log(n_actions)) / (kappa * math.sqrt(K))


def stepsize_thm4(omega: float, gamma_bound: float, K: int, q: float) -> float:
    """min{(1 - Gamma) / (omega Gamma), q log K / (omega K)}; q = inf selects the first branch."""
    if omega <= 0 or not 0 < gamma_bound < 1:
        raise ValueError("need omega > 0 and Gamma in (0, 1)")
    first = (1.0 - gamma_bound) / (omega * gamma_bound)
    if math.isinf(q):
        return first
    return min(first, q * math.log(K) / (omega * K))


def q_oracle(omega: float, gamma_bound: float, d0: float, gap0: float, sigma: float,
             fallback: float | None = None) -> float:
    """q = 2 (1 + log((2 Gamma (1-Gamma) omega^2 D0 + 2 Gamma (1-Gamma) omega gap0) / sigma^2))."""
    if sigma == 0:
        warnings.warn("sigma = 0 leaves q undefined; using the supplied fallback", stacklevel=2)
        return math.inf if fallback is None else fallback
    g = gamma_bound * (1.0 - gamma_bound)
    return 2.0 * (1.0 + math.log((2 * g * omega**2 * d0 + 2 * g * omega * gap0) / sigma**2))


# ---------------------------------------------------------------- low-dimensional policies


@dataclass
class LowDimPolicy:
    """Policy pi(.|s) proportional to exp((Psi theta_tilde)(s, .))."""

    theta_tilde: np.ndarray
    features: FeatureMap
    n_actions: int

    @classmethod
    def initial(cls, features: FeatureMap, n_actions: int) -> "LowDimPolicy":
        return cls(np.zeros(features.d), features, n_actions)

    def probs(self) -> np.ndarray:
        logits = (self.features.psi @ self.theta_tilde).reshape(-1, self.n_actions)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def low_dim_step(state: LowDimPolicy, theta_k, lam: float, omega: float) -> LowDimPolicy:
    """theta_tilde <- (theta_tilde - lam theta_k) / (1 + lam omega)."""
    new = (state.theta_tilde - lam * np.asarray(theta_k, float)) / (1.0 + lam * omega)
    return LowDimPolicy(new, state.features, state.n_actions)


# ---------------------------------------------------------------- the loop


@dataclass(frozen=True)
class Schedule:
    """Step-size rule: ``thm3`` (kappa), ``thm4`` (gamma_bound, q), ``constant`` (value) or ``user`` (values)."""

    kind: str = "thm3"
    kappa: float | None = None
    gamma_bound: float | None = None
    q: float = math.inf
    value: float | None = None
    values: tuple = ()

    def lambdas(self, K: int, n_actions: int, omega: float) -> list:
        if K == 0:
            return []
        if self.kind == "thm3":
            lam = [stepsize_thm3(self.kappa, K, n_actions)] * K
        elif self.kind == "thm4":
            lam = [stepsize_thm4(omega, self.gamma_bound, K, self.q)] * K
        elif self.kind == "constant":
            lam = [float(self.value)] * K
        elif self.kind == "user":
            if len(self.values) < K:
                raise ValueError(f"user schedule has {len(self.values)} step sizes, need {K}")
            lam = [float(v) for v in self.values[:K]]
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if min(lam) <= 0:
            raise ValueError("step sizes must be positive")
        return lam


@dataclass(frozen=True)
class CriticSpec:
    """Which critic evaluates each iterate.

    kind: ``exact_oracle``, ``multiple_trajectory`` (needs ``multi``), ``vrtd`` or
    ``evrtd`` (need ``vrtd`` and a feature map). ``warm_start`` seeds each VRTD
    run with the previous iterate's coefficients.
    """

    kind: str = "exact_oracle"
    multi: MultiTrajConfig | None = None
    vrtd: VrtdConfig | None = None
    warm_start: bool = False


@dataclass(frozen=True)
class SpmdConfig:
    k_iters: int
    schedule: Schedule = Schedule()
    critic: CriticSpec = CriticSpec()
    reg: Regularizer = NO_REG
    output_rule: str | None = None  # default: uniform_random_iterate if unregularized else last_iterate
    seed: int = 0

    def resolved_output_rule(self) -> str:
        if self.output_rule is not None:
            return self.output_rule
        return "last_iterate" if self.reg.active else "uniform_random_iterate"


@dataclass
class IterationRecord:
    k: int
    rho: float | None
    samples: int
    lam: float
    distance: float | None = None
    critic_rho: float | None = None
    perturbed: bool = False


@dataclass
class PolicyTrace:
    records: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    final_policy: np.ndarray | None = None
    output_index: int = 0
    theta_tilde: np.ndarray | None = None

    @property
    def total_samples(self) -> int:
        return sum(r.samples for r in self.records)


def _streams(seed):
    actor, critic, oracle = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(actor), critic, oracle


def spmd_run(mdp: TabularAmdp, cfg: SpmdConfig, features: FeatureMap | None = None,
             pi_star=None, oracle_metrics: bool = True, keep_policies: bool = False) -> PolicyTrace:
    """Run K mirror-descent iterations from the uniform policy.

    Record k describes pi_k and the critic run used to leave it. With
    ``oracle_metrics`` the exact rho(pi_k) is logged; with ``pi_star`` also
    D(pi_k, pi*).
    """
    reg = cfg.reg
    K = cfg.k_iters
    if K < 0:
        raise ValueError("k_iters must be >= 0")
    lams = cfg.schedule.lambdas(K, mdp.n_actions, reg.omega)
    actor_rng, critic_ss, oracle_ss = _streams(cfg.seed)
    critic_seeds = critic_ss.spawn(K)
    spec = cfg.critic
    if spec.kind in ("vrtd", "evrtd") and (features is None or spec.vrtd is None):
        raise ValueError(f"critic {spec.kind!r} needs a feature map and a VrtdConfig")
    if spec.kind == "multiple_trajectory" and spec.multi is None:
        raise ValueError("multiple_trajectory critic needs a MultiTrajConfig")
    oracle = GenerativeOracle(mdp, oracle_ss) if spec.kind == "multiple_trajectory" else None
    nu_star = None
    if pi_star is not None:
        nu_star = stationary_distribution(induced_state_kernel(mdp, pi_star))
    low_dim = None
    if features is not None and spec.kind in ("vrtd", "evrtd") and reg.kind != "kl_to_reference":
        low_dim = LowDimPolicy.initial(features, mdp.n_actions)

    trace = PolicyTrace()
    probs = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    theta_prev = None
    for k in range(K + 1):
        rho = average_cost(mdp, probs, reg) if oracle_metrics else None
        dist = policy_distance(probs, pi_star, nu_star) if pi_star is not None else None
        if keep_policies or cfg.resolved_output_rule() == "uniform_random_iterate":
            trace.policies.append(probs)
        if k == K:
            trace.records.append(IterationRecord(k, rho, 0, 0.0, dist))
            break
        extra = reg.value(probs) if reg.active else None
        samples, critic_rho, perturbed, theta = 0, None, False, None
        try:
            if spec.kind == "exact_oracle":
                q_hat = differential_values(mdp, probs, reg).q_bar
            elif spec.kind == "multiple_trajectory":
                out = multiple_trajectory_evaluate(oracle, probs, spec.multi, critic_seeds[k], extra)
                q_hat, samples, critic_rho = out.q_hat, out.samples_used, out.rho_hat
            elif spec.kind in ("vrtd", "evrtd"):
                sim_ss, = critic_seeds[k].spawn(1)
                sim = TrajectorySimulator(mdp, probs, sim_ss)
                theta0 = theta_prev if (spec.warm_start and theta_prev is not None) else None
                run = vrtd_run if spec.kind == "vrtd" else evrtd_run
                out = run(sim, features, spec.vrtd, theta0, extra)
                theta = out.theta
                q_hat = out.q_table(mdp.n_states, mdp.n_actions)
                samples, critic_rho, perturbed = out.samples_used, out.rho_hat, out.perturbed
                theta_prev = theta
            else:
                raise ValueError(f"unknown critic kind {spec.kind!r}")
        except Divergence as exc:
            raise Divergence(f"iteration {k}: {exc}") from exc
        trace.records.append(IterationRecord(k, rho, samples, lams[k], dist, critic_rho, perturbed))
        probs = kl_prox_update(probs, q_hat, lams[k], reg)
        if low_dim is not None:
            low_dim = low_dim_step(low_dim, theta, lams[k], reg.omega)

    if K == 0:
        trace.final_policy, trace.output_index = probs, 0
    elif cfg.resolved_output_rule() == "uniform_random_iterate":
        r = int(actor_rng.integers(K))
        trace.final_policy, trace.output_index = trace.policies[r], r
    elif cfg.resolved_output_rule() == "last_iterate":
        trace.final_policy, trace.output_index = probs, K
    else:
        raise ValueError(f"unknown output rule {cfg.output_rule!r}")
    if not keep_policies and cfg.resolved_output_rule() == "uniform_random_iterate":
        trace.policies = []
    if low_dim is not None:
        trace.theta_tilde = low_dim.theta_tilde
    return trace


def perturbation_active(pi, underline_pi: float) -> bool:
    return construct_perturbed_policy(pi, underline_pi).needed
