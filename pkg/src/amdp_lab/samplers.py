"""Sample-access models: generative oracle and single-trajectory Markovian simulator.

The simulator's live state is the pair (s, a) with a already drawn from the
behaviour policy. One transition draws s' ~ P(.|s,a) then a' ~ pi(.|s') and
consumes two uniforms from the simulator's generator; the step counter counts
transitions, which is the sample-complexity meter used by every critic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import TabularAmdp, as_probs
from .errors import DimensionMismatch

# uniforms are drawn in blocks of this many transitions to bound memory
CHUNK = 1 << 18


def alias_tables(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Alias tables (q, alias) with the same leading shape as ``probs``."""
    probs = np.asarray(probs, float)
    flat = np.ascontiguousarray(probs.reshape(-1, probs.shape[-1]))
    q = np.empty_like(flat)
    alias = np.empty(flat.shape, dtype=np.int64)
    _kernels.build_alias(flat, q, alias)
    return q.reshape(probs.shape), alias.reshape(probs.shape)


def row_cdf(probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(np.asarray(probs, float), axis=-1)
    cdf /= cdf[..., -1:]
    return np.ascontiguousarray(cdf)


@dataclass(frozen=True)
class TransitionSample:
    s: int
    a: int
    s_next: int
    a_next: int
    cost: float


class GenerativeOracle:
    """Answers (s, a) -> (s', c(s, a)) queries; ``queries`` counts them."""

    def __init__(self, mdp: TabularAmdp, seed=None):
        self.mdp = mdp
        self.rng = np.random.default_rng(seed)
        self._kcdf = row_cdf(mdp.kernel)
        self.queries = 0

    def _check(self, s, a):
        if np.any((s < 0) | (s >= self.mdp.n_states)) or np.any((a < 0) | (a >= self.mdp.n_actions)):
            raise IndexError("state or action index out of range")

    def query(self, s: int, a: int) -> tuple[int, float]:
        self._check(np.asarray(s), np.asarray(a))
        s_next = _kernels.draw(self._kcdf[s, a], self.rng.random())
        self.queries += 1
        return int(s_next), float(self.mdp.cost[s, a])

    def query_batch(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=np.int64)
        a = np.asarray(a, dtype=np.int64)
        self._check(s, a)
        u = self.rng.random(s.shape)
        cdf = self._kcdf[s, a]
        s_next = np.minimum((u[..., None] >= cdf).sum(axis=-1), self.mdp.n_states - 1)
        self.queries += s.size
        return s_next, self.mdp.cost[s, a]


def draw_actions(pi_cdf: np.ndarray, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(np.shape(s))
    cdf = pi_cdf[s]
    return np.minimum((u[..., None] >= cdf).sum(axis=-1), pi_cdf.shape[1] - 1)


class TrajectorySimulator:
    """One live Markov trajectory under a behaviour policy. Single owner only."""

    def __init__(self, mdp: TabularAmdp, pi, seed=None, init_state: int | None = None):
        probs = as_probs(pi)
        if probs.shape != (mdp.n_states, mdp.n_actions):
            raise DimensionMismatch(f"policy shape {probs.shape} does not match model")
        self.mdp = mdp
        self.probs = probs
        self.rng = np.random.default_rng(seed)
        self.kq, self.ka = alias_tables(mdp.kernel)
        self.pq, self.pa = alias_tables(probs)
        u = self.rng.random(2)
        s = min(int(u[0] * mdp.n_states), mdp.n_states - 1)
        self.state = int(s if init_state is None else init_state)
        self.action = int(_kernels.draw_action(self.pq, self.pa, self.state, u[1]))
        self.steps = 0

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def rollout(self, length: int) -> np.ndarray:
        """Rows (s_t, a_t, c_t) for t < length; the chain advances ``length`` transitions."""
        if length < 1:
            raise ValueError("rollout length must be >= 1")
        out = np.empty((length, 2), dtype=np.int64)
        u = self.rng.random(2 * length)
        self.state, self.action = _kernels.rollout_path(
            self.state, self.action, self.kq, self.ka, self.pq, self.pa, u, length, out)
        self.steps += length
        return np.column_stack([out, self.mdp.cost[out[:, 0], out[:, 1]]])

    def _uniforms_per_tuple(self, tau: int, perturb: bool) -> int:
        return 2 * (tau + 1) + (1 if perturb and tau == 0 else 0)

    def sample_tuples(self, n: int, tau: int, pi_tilde=None) -> np.ndarray:
        """n successive skipped tuples as an int array with columns (s, a, s', a').

        With ``pi_tilde`` the recorded action of each tuple is drawn from pi_tilde
        (the next action a' and the skipped segment still follow pi). The chain
        resumes from (s', a'). Each tuple costs tau + 1 transitions.
        """
        if tau < 0:
            raise ValueError("tau must be >= 0")
        perturb = pi_tilde is not None
        rq, ra = alias_tables(as_probs(pi_tilde)) if perturb else (self.pq, self.pa)
        out = np.empty((n, 4), dtype=np.int64)
        per = self._uniforms_per_tuple(tau, perturb)
        step = max(1, CHUNK // (tau + 1))
        for lo in range(0, n, step):
            m = min(step, n - lo)
            u = self.rng.random(per * m)
            self.state, self.action = _kernels.sample_tuples(
                self.state, self.action, self.kq, self.ka, self.pq, self.pa, rq, ra, perturb, u, tau, m,
                out[lo:lo + m])
        self.steps += n * (tau + 1)
        return out

    def skip_and_sample(self, tau: int) -> TransitionSample:
        s, a, s1, a1 = self.sample_tuples(1, tau)[0]
        return TransitionSample(int(s), int(a), int(s1), int(a1), float(self.mdp.cost[s, a]))

    def perturbed_skip_and_sample(self, tau: int, pi_tilde) -> TransitionSample:
        s, a, s1, a1 = self.sample_tuples(1, tau, pi_tilde)[0]
        return TransitionSample(int(s), int(a), int(s1), int(a1), float(self.mdp.cost[s, a]))
