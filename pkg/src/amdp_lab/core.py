"""Exact tabular average-cost MDP model and ground-truth oracles.

Everything here is deterministic linear algebra on the full model. The
stochastic components (samplers, critics, actor) are certified against these
functions, so they favour exactness over speed.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AssumptionViolated,
    DimensionMismatch,
    DomainError,
    ModelValidationError,
    NoConvergence,
)

STOCH_TOL = 1e-12
# probabilities are clamped here before taking logs
LOG_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class TabularAmdp:
    """Finite AMDP with kernel ``P[s, a, s']`` and cost table ``c[s, a]``."""

    kernel: np.ndarray
    cost: np.ndarray
    cost_bound: float | None = None

    def __post_init__(self):
        kernel = np.ascontiguousarray(self.kernel, dtype=float)
        cost = np.ascontiguousarray(self.cost, dtype=float)
        if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
            raise ModelValidationError(f"kernel must have shape (S, A, S), got {kernel.shape}")
        if cost.shape != kernel.shape[:2]:
            raise ModelValidationError(
                f"cost shape {cost.shape} does not match kernel {kernel.shape[:2]}"
            )
        if not (np.all(np.isfinite(kernel)) and np.all(np.isfinite(cost))):
            raise ModelValidationError("kernel and cost must be finite")
        neg = np.argwhere(kernel < 0)
        if len(neg):
            s, a, _ = neg[0]
            raise ModelValidationError(f"kernel row (s={s}, a={a}) has a negative entry")
        sums = kernel.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > STOCH_TOL)
        if len(bad):
            s, a = bad[0]
            raise ModelValidationError(
                f"kernel row (s={s}, a={a}) sums to {sums[s, a]!r}, expected 1"
            )
        bound = float(np.max(np.abs(cost))) if self.cost_bound is None else float(self.cost_bound)
        if np.max(np.abs(cost)) > bound + 1e-12:
            raise ModelValidationError(f"cost_bound {bound} is below max|c| = {np.max(np.abs(cost))}")
        kernel.setflags(write=False)
        cost.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "cost_bound", bound)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "kernel": self.kernel.tolist(),
            "cost": self.cost.tolist(),
            "cost_bound": self.cost_bound,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularAmdp":
        for key in ("n_states", "n_actions", "kernel", "cost"):
            if key not in data:
                raise ModelValidationError(f"model file is missing field '{key}'")
        mdp = cls(np.asarray(data["kernel"], float), np.asarray(data["cost"], float),
                  data.get("cost_bound"))
        if (mdp.n_states, mdp.n_actions) != (data["n_states"], data["n_actions"]):
            raise ModelValidationError(
                f"declared size ({data['n_states']}, {data['n_actions']}) does not match "
                f"kernel size ({mdp.n_states}, {mdp.n_actions})"
            )
        if mdp.n_states < 2:
            raise ModelValidationError("model files need n_states >= 2")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularAmdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic matrix ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise DimensionMismatch(f"policy must be a (S, A) matrix, got shape {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > STOCH_TOL):
            row = int(np.argmax(np.abs(probs.sum(axis=1) - 1.0) + (probs < 0).any(axis=1)))
            raise DomainError(f"policy row {row} is not a probability vector")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        return cls(np.asarray(data["probs"], float))


def as_probs(pi) -> np.ndarray:
    return pi.probs if isinstance(pi, Policy) else np.asarray(pi, dtype=float)


def _check_shapes(mdp: TabularAmdp, probs: np.ndarray) -> None:
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(
            f"policy shape {probs.shape} does not match model ({mdp.n_states}, {mdp.n_actions})"
        )


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-state KL(p(.|s) || q(.|s)) with 0 log 0 = 0."""
    p = np.asarray(p, float)
    q = np.maximum(np.asarray(q, float), LOG_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(q)), 0.0)
    return terms.sum(axis=1)


@dataclass(frozen=True, eq=False)
class Regularizer:
    """Convex policy regularizer h^pi(s).

    ``negative_entropy``: h = omega * sum_a pi log pi.
    ``kl_to_reference``: h = omega * KL(pi(.|s) || reference(.|s)).
    Both are omega-strongly convex with respect to the KL divergence.
    """

    kind: str = "none"
    omega: float = 0.0
    reference: Policy | None = None

    def __post_init__(self):
        if self.kind not in ("none", "negative_entropy", "kl_to_reference"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if self.kind == "none" and self.omega != 0:
            raise ValueError("kind='none' requires omega = 0")
        if self.kind == "kl_to_reference" and self.reference is None:
            raise ValueError("kl_to_reference needs a reference policy")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.omega > 0

    def value(self, pi) -> np.ndarray:
        probs = as_probs(pi)
        if not self.active:
            return np.zeros(probs.shape[0])
        if self.kind == "negative_entropy":
            return -self.omega * _entropy(probs)
        return self.omega * kl_rows(probs, self.reference.probs)

    def grad(self, pi) -> np.ndarray:
        probs = as_probs(pi)
        if not self.active:
            return np.zeros_like(probs)
        if np.any(probs <= 0):
            raise DomainError("log-based regularizer gradient needs a strictly positive policy")
        g = np.log(probs) + 1.0
        if self.kind == "kl_to_reference":
            g = g - np.log(np.maximum(self.reference.probs, LOG_FLOOR))
        return self.omega * g

    def min_over_simplex(self, q: np.ndarray) -> np.ndarray:
        """Per-state min over p of <q(s,.), p> + h^p(s)."""
        if not self.active:
            return q.min(axis=1)
        z = -q / self.omega
        if self.kind == "kl_to_reference":
            z = z + np.log(np.maximum(self.reference.probs, LOG_FLOOR))
        zmax = z.max(axis=1, keepdims=True)
        return -self.omega * (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))


NO_REG = Regularizer()


def _entropy(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(probs > 0, probs * np.log(np.maximum(probs, LOG_FLOOR)), 0.0).sum(axis=1)


@dataclass(frozen=True, eq=False)
class StationaryInfo:
    nu: np.ndarray
    rho: float
    t_mix: int
    gamma_bound: float


@dataclass(frozen=True, eq=False)
class DifferentialValues:
    v_bar: np.ndarray
    q_bar: np.ndarray  # shape (S, A)
    rho: float
    nu: np.ndarray

    @property
    def q_flat(self) -> np.ndarray:
        return self.q_bar.reshape(-1)


def induced_state_kernel(mdp: TabularAmdp, pi) -> np.ndarray:
    probs = as_probs(pi)
    _check_shapes(mdp, probs)
    return np.einsum("sa,sat->st", probs, mdp.kernel)


def induced_state_action_kernel(mdp: TabularAmdp, pi) -> np.ndarray:
    """P^pi((s,a),(s',a')) = P(s'|s,a) pi(a'|s'), flattened row-major over (s, a)."""
    probs = as_probs(pi)
    _check_shapes(mdp, probs)
    big = mdp.kernel[:, :, :, None] * probs[None, None, :, :]
    return big.reshape(mdp.n_pairs, mdp.n_pairs)


def stationary_distribution(p: np.ndarray) -> np.ndarray:
    """Solve nu^T P = nu^T, sum(nu) = 1 directly."""
    p = np.asarray(p, float)
    n = p.shape[0]
    if p.shape != (n, n):
        raise DimensionMismatch(f"transition matrix must be square, got {p.shape}")
    a = p.T - np.eye(n)
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        nu = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolated("balance equations are singular (chain is not unichain)") from exc
    if np.linalg.cond(a) > 1e12 or np.min(nu) < -1e-9:
        raise AssumptionViolated("no unique stationary distribution (chain is not unichain)")
    nu = np.clip(nu, 0.0, None)
    nu /= nu.sum()
    if np.abs(nu @ p - nu).sum() > 1e-9:
        raise AssumptionViolated("stationary residual too large")
    return nu


def mixing_time(p: np.ndarray, nu: np.ndarray | None = None, t_max: int = 100_000) -> int:
    """Smallest t >= 1 with max_s ||P^t(s, .) - nu||_1 <= 1/2."""
    p = np.asarray(p, float)
    nu = stationary_distribution(p) if nu is None else nu
    pt = p.copy()
    for t in range(1, t_max + 1):
        if np.abs(pt - nu[None, :]).sum(axis=1).max() <= 0.5:
            return t
        pt = pt @ p
    raise AssumptionViolated(f"mixing time exceeds t_max={t_max}")


def mixing_gap(p: np.ndarray, nu: np.ndarray, k: int) -> float:
    """||P^k - 1 nu^T||_inf (max absolute row sum)."""
    pk = np.linalg.matrix_power(np.asarray(p, float), k)
    return float(np.abs(pk - nu[None, :]).sum(axis=1).max())


def mixing_bound_check(p: np.ndarray, nu: np.ndarray, k: int, t_mix: int | None = None) -> bool:
    t_mix = mixing_time(p, nu) if t_mix is None else t_mix
    return mixing_gap(p, nu, k) <= 0.5 ** (k // t_mix) + 1e-12


def effective_cost(mdp: TabularAmdp, pi, reg: Regularizer | None = None) -> np.ndarray:
    """c(s,a) + h^pi(s): the per-step cost a critic of pi actually sees."""
    reg = reg or NO_REG
    return mdp.cost + reg.value(pi)[:, None]


def average_cost(mdp: TabularAmdp, pi, reg: Regularizer | None = None) -> float:
    probs = as_probs(pi)
    nu = stationary_distribution(induced_state_kernel(mdp, probs))
    return float(nu @ (probs * effective_cost(mdp, probs, reg)).sum(axis=1))


def stationary_info(mdp: TabularAmdp, pi, reg: Regularizer | None = None,
                    t_max: int = 100_000) -> StationaryInfo:
    probs = as_probs(pi)
    p = induced_state_kernel(mdp, probs)
    nu = stationary_distribution(p)
    rho = float(nu @ (probs * effective_cost(mdp, probs, reg)).sum(axis=1))
    return StationaryInfo(nu=nu, rho=rho, t_mix=mixing_time(p, nu, t_max), gamma_bound=1.0 - nu.min())


def differential_values(mdp: TabularAmdp, pi, reg: Regularizer | None = None) -> DifferentialValues:
    """Basic differential values, anchored so the stationary mean of Q is zero.

    Solves (I - P^pi + 1 nu_sa^T) Q = c + h - rho 1, which is equivalent to the
    Bellman equation plus the anchoring constraint.
    """
    probs = as_probs(pi)
    _check_shapes(mdp, probs)
    nu = stationary_distribution(induced_state_kernel(mdp, probs))
    nu_sa = (nu[:, None] * probs).reshape(-1)
    cost = effective_cost(mdp, probs, reg).reshape(-1)
    rho = float(nu_sa @ cost)
    p_sa = induced_state_action_kernel(mdp, probs)
    n = mdp.n_pairs
    a = np.eye(n) - p_sa + np.outer(np.ones(n), nu_sa)
    try:
        q = np.linalg.solve(a, cost - rho)
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolated("Bellman system has a null space beyond constants") from exc
    if np.abs(a @ q - (cost - rho)).max() > 1e-8 * max(1.0, mdp.cost_bound):
        raise AssumptionViolated("Bellman system is numerically singular")
    q_bar = q.reshape(mdp.n_states, mdp.n_actions)
    return DifferentialValues(v_bar=(probs * q_bar).sum(axis=1), q_bar=q_bar, rho=rho, nu=nu)


def bellman_residuals(mdp: TabularAmdp, pi, dv: DifferentialValues,
                      reg: Regularizer | None = None) -> tuple[float, float]:
    """Max-abs residuals of the V and Q Bellman equations."""
    probs = as_probs(pi)
    cost = effective_cost(mdp, probs, reg)
    c_pi = (probs * cost).sum(axis=1)
    rv = dv.v_bar - (c_pi - dv.rho + induced_state_kernel(mdp, probs) @ dv.v_bar)
    rq = dv.q_flat - (cost.reshape(-1) - dv.rho + induced_state_action_kernel(mdp, probs) @ dv.q_flat)
    return float(np.abs(rv).max()), float(np.abs(rq).max())


def policy_gradient(mdp: TabularAmdp, pi, reg: Regularizer | None = None) -> np.ndarray:
    """d rho / d pi(a|s) = nu(s) (Q(s,a) + grad h(s,a))."""
    reg = reg or NO_REG
    probs = as_probs(pi)
    dv = differential_values(mdp, probs, reg)
    return dv.nu[:, None] * (dv.q_bar + reg.grad(probs))


def performance_difference(mdp: TabularAmdp, pi, pi_new, reg: Regularizer | None = None) -> float:
    """E_{s ~ nu^{pi_new}}[<Q^pi(s,.), pi_new - pi> + h^{pi_new}(s) - h^pi(s)]."""
    reg = reg or NO_REG
    p, p_new = as_probs(pi), as_probs(pi_new)
    dv = differential_values(mdp, p, reg)
    nu_new = stationary_distribution(induced_state_kernel(mdp, p_new))
    inner = (dv.q_bar * (p_new - p)).sum(axis=1) + reg.value(p_new) - reg.value(p)
    return float(nu_new @ inner)


def optimality_gap_certificate(mdp: TabularAmdp, pi, reg: Regularizer | None = None) -> float:
    """min_s min_p [<Q^pi(s,.), p - pi(s,.)> + h^p(s) - h^pi(s)]; >= -tol certifies optimality."""
    reg = reg or NO_REG
    probs = as_probs(pi)
    dv = differential_values(mdp, probs, reg)
    current = (dv.q_bar * probs).sum(axis=1) + reg.value(probs)
    return float(np.min(reg.min_over_simplex(dv.q_bar) - current))


def solve_optimal(mdp: TabularAmdp, reg: Regularizer | None = None, tol: float = 1e-12,
                  max_iter: int = 5000) -> tuple[Policy, float]:
    """Exact-critic policy mirror descent with doubling step sizes.

    Stops when the average cost stalls and the per-state optimality certificate
    is >= -tol. For the unregularized problem the greedy deterministic policy is
    returned whenever it certifies.
    """
    from .actor import kl_prox_update

    reg = reg or NO_REG
    probs = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    lam = 1.0
    rho = average_cost(mdp, probs, reg)
    for _ in range(max_iter):
        dv = differential_values(mdp, probs, reg)
        new = kl_prox_update(probs, dv.q_bar, lam, reg)
        new_rho = average_cost(mdp, new, reg)
        lam = min(2.0 * lam, 1e8)
        if rho - new_rho < tol and optimality_gap_certificate(mdp, new, reg) >= -tol:
            probs, rho = new, new_rho
            break
        probs, rho = new, new_rho
    else:
        raise NoConvergence(f"policy mirror descent did not certify within {max_iter} iterations")
    if not reg.active:
        greedy = Policy.deterministic(
            differential_values(mdp, probs).q_bar.argmin(axis=1), mdp.n_actions)
        g_rho = average_cost(mdp, greedy)
        if g_rho <= rho + tol and optimality_gap_certificate(mdp, greedy) >= -tol:
            return greedy, g_rho
    return Policy(probs / probs.sum(axis=1, keepdims=True)), rho


def vertex_policies(n_states: int, n_actions: int, limit: int = 4096, rng=None):
    """All deterministic policies, or a random sample of ``limit`` of them."""
    total = n_actions ** n_states
    if total <= limit:
        for combo in itertools.product(range(n_actions), repeat=n_states):
            yield Policy.deterministic(combo, n_actions)
        return
    rng = np.random.default_rng(rng)
    for _ in range(limit):
        yield Policy.deterministic(rng.integers(n_actions, size=n_states), n_actions)


def ergodicity_gamma(mdp: TabularAmdp, extra=(), n_random: int = 64, vertex_limit: int = 1024,
                     seed: int = 0) -> float:
    """Probe estimate of Gamma = 1 - min_pi min_s nu^pi(s).

    The true constant quantifies over all policies; this takes the minimum over
    vertex policies, random interior policies and any ``extra`` policies.
    """
    rng = np.random.default_rng(seed)
    worst = 1.0
    probes = list(extra)
    probes += list(vertex_policies(mdp.n_states, mdp.n_actions, vertex_limit, rng))
    probes += [rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states) for _ in range(n_random)]
    for pi in probes:
        worst = min(worst, stationary_distribution(induced_state_kernel(mdp, pi)).min())
    return 1.0 - worst
