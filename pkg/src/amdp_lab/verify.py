"""Invariant suite runner behind ``amdp-lab verify``.

Each check returns (observed, bound) pairs; a check passes when every observed
value is at most its bound. Bounds are multiplied by ``tol_scale`` so that a
scale of 0 turns every check with nonzero slack into a deterministic failure.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .actor import kl_prox_update, three_point_gap
from .core import (
    Policy,
    TabularAmdp,
    bellman_residuals,
    differential_values,
    induced_state_kernel,
    mixing_gap,
    mixing_time,
    performance_difference,
    stationary_distribution,
)
from .critics import VrtdConfig, evrtd_run, expected_rho_hat, vrtd_run
from .errors import AmdpError
from .features import build_tabular_features, projected_model
from .lab import RandomMdpSpec, generate_random_mdp, model_hash
from .samplers import TrajectorySimulator

LEVELS = {"quick": 5, "full": 40}


@dataclass
class Failure:
    module: str
    invariant: str
    observed: float
    bound: float
    message: str = ""


@dataclass
class VerifyReport:
    level: str
    checked: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        return json.dumps({"level": self.level, "ok": self.ok, "checked": self.checked,
                           "failures": [asdict(f) for f in self.failures]}, indent=2)


def _instances(n, n_states=6, n_actions=3):
    for seed in range(n):
        yield seed, generate_random_mdp(RandomMdpSpec(n_states, n_actions, 0.5, (0.0, 10.0), 1.0, seed))


def _random_policy(rng, n_states, n_actions):
    return Policy(rng.dirichlet(np.ones(n_actions), size=n_states))


def check_stationary(n):
    for _, mdp in _instances(n):
        p = induced_state_kernel(mdp, Policy.uniform(mdp.n_states, mdp.n_actions))
        nu = stationary_distribution(p)
        yield float(np.abs(nu @ p - nu).max()), 1e-12


def check_bellman(n):
    rng = np.random.default_rng(0)
    for _, mdp in _instances(n):
        pi = _random_policy(rng, mdp.n_states, mdp.n_actions)
        rv, rq = bellman_residuals(mdp, pi, differential_values(mdp, pi))
        yield max(rv, rq), 1e-10


def check_perf_diff(n):
    rng = np.random.default_rng(1)
    for _, mdp in _instances(n):
        p = _random_policy(rng, mdp.n_states, mdp.n_actions)
        q = _random_policy(rng, mdp.n_states, mdp.n_actions)
        gap = differential_values(mdp, q).rho - differential_values(mdp, p).rho
        yield abs(gap - performance_difference(mdp, p, q)), 1e-8


def check_mixing(n):
    for _, mdp in _instances(n):
        p = induced_state_kernel(mdp, Policy.uniform(mdp.n_states, mdp.n_actions))
        nu = stationary_distribution(p)
        t = mixing_time(p, nu)
        for mult in (1, 2, 5):
            yield mixing_gap(p, nu, mult * t), 0.5 ** mult


def check_exact_features(n):
    for seed, mdp in _instances(n):
        feats = build_tabular_features(mdp, kind="exact")
        model = projected_model(mdp, Policy.uniform(mdp.n_states, mdp.n_actions), feats)
        yield model.eps_approx, 1e-8


def check_alias_sampling(n):
    for _, mdp in _instances(max(1, n // 5)):
        pi = Policy.uniform(mdp.n_states, mdp.n_actions)
        sim = TrajectorySimulator(mdp, pi, seed=0)
        m = 200_000
        path = sim.rollout(m)
        nu = stationary_distribution(induced_state_kernel(mdp, pi))
        freq = np.bincount(path[:, 0].astype(int), minlength=mdp.n_states) / m
        # loose: autocorrelated path, so allow a wide band
        yield float(np.abs(freq - nu).max()), 0.02


def check_multi_traj_bias(n):
    for _, mdp in _instances(n):
        pi = Policy.uniform(mdp.n_states, mdp.n_actions)
        p = induced_state_kernel(mdp, pi)
        t = mixing_time(p)
        rho = differential_values(mdp, pi).rho
        for mult in (2, 4):
            bias = abs(expected_rho_hat(mdp, pi, mult * t) - rho)
            yield bias, mdp.cost_bound * 0.5 ** mult


def check_evrtd_reduction(n):
    for _, mdp in _instances(max(1, n // 5)):
        pi = Policy.uniform(mdp.n_states, mdp.n_actions)
        feats = build_tabular_features(mdp, kind="exact")
        cfg = VrtdConfig.constant(0.05, 200, 100, 100, 2, 1, 1, 0.1)
        a = vrtd_run(TrajectorySimulator(mdp, pi, seed=3), feats, cfg)
        b = evrtd_run(TrajectorySimulator(mdp, pi, seed=3), feats, cfg)
        yield float(np.abs(a.theta - b.theta).max()), 0.0


def check_prox_positive(n):
    rng = np.random.default_rng(2)
    for _, mdp in _instances(n):
        pi = Policy.uniform(mdp.n_states, mdp.n_actions).probs
        for _ in range(20):
            pi = kl_prox_update(pi, rng.normal(scale=50.0, size=pi.shape), 10.0)
        yield float(-pi.min()), 0.0


def check_shift_invariance(n):
    rng = np.random.default_rng(3)
    for _, mdp in _instances(n):
        pi = _random_policy(rng, mdp.n_states, mdp.n_actions).probs
        q = rng.normal(size=pi.shape)
        b = rng.normal(size=(pi.shape[0], 1))
        yield float(np.abs(kl_prox_update(pi, q, 0.7) - kl_prox_update(pi, q + b, 0.7)).max()), 1e-12


def check_three_point(n):
    rng = np.random.default_rng(4)
    for _, mdp in _instances(n):
        pi = _random_policy(rng, mdp.n_states, mdp.n_actions).probs
        q = rng.normal(size=pi.shape)
        nxt = kl_prox_update(pi, q, 0.5)
        p = _random_policy(rng, mdp.n_states, mdp.n_actions).probs
        # three-point lemma: the gap vector is nonnegative
        yield float(-three_point_gap(pi, nxt, q, 0.5, None, p).min()), 1e-10


def check_generator(n):
    for seed in range(n):
        spec = RandomMdpSpec(10, 3, seed=seed)
        a, b = generate_random_mdp(spec), generate_random_mdp(spec)
        yield float(model_hash(a) != model_hash(b)), 0.0
        yield float(a.kernel.min() <= 0), 0.0


REGISTRY = [
    ("amdp-core", "stationary_fixed_point", check_stationary),
    ("amdp-core", "bellman_residual", check_bellman),
    ("amdp-core", "performance_difference", check_perf_diff),
    ("amdp-core", "mixing_bound", check_mixing),
    ("linear-fa", "exact_features_eps_approx", check_exact_features),
    ("samplers", "stationary_frequencies", check_alias_sampling),
    ("critics", "multiple_trajectory_bias", check_multi_traj_bias),
    ("critics", "evrtd_reduces_to_vrtd", check_evrtd_reduction),
    ("spmd-actor", "prox_positivity", check_prox_positive),
    ("spmd-actor", "shift_invariance", check_shift_invariance),
    ("spmd-actor", "three_point", check_three_point),
    ("lab-cli", "generator_determinism", check_generator),
]


def run_verify(level: str = "quick", tol_scale: float = 1.0, model_path=None,
               fail_fast: bool = True) -> VerifyReport:
    """Run every registered invariant; stop at the first failure unless ``fail_fast`` is off."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}; expected one of {sorted(LEVELS)}")
    n = LEVELS[level]
    report = VerifyReport(level)
    if model_path is not None:
        report.checked.append("amdp-core/model_load")
        try:
            TabularAmdp.load(model_path)
        except (AmdpError, OSError, ValueError) as exc:
            report.failures.append(Failure("amdp-core", "model_load", float("nan"), float("nan"),
                                           f"{type(exc).__name__}: {exc}"))
            return report
    for module, name, fn in REGISTRY:
        report.checked.append(f"{module}/{name}")
        for observed, bound in fn(n):
            scaled = bound * tol_scale if bound > 0 else bound
            if not observed <= scaled:
                report.failures.append(Failure(module, name, float(observed), float(scaled)))
                break
        if report.failures and fail_fast:
            return report
    return report
