"""Linear function approximation: feature maps, weighted geometry, TD fixed points.

Vectors over state-action pairs are flattened row-major, index ``s * |A| + a``,
matching ``induced_state_action_kernel``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    NO_REG,
    Regularizer,
    TabularAmdp,
    as_probs,
    differential_values,
    effective_cost,
    induced_state_action_kernel,
    induced_state_kernel,
    stationary_distribution,
)
from .errors import DimensionMismatch, FeatureDegenerate, MonotonicityViolated

MU_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix ``psi`` of shape (|S||A|, d)."""

    psi: np.ndarray
    min_angle: float = 1e-3

    def __post_init__(self):
        psi = np.array(self.psi, dtype=float)
        if psi.ndim != 2:
            raise DimensionMismatch(f"psi must be 2-D, got shape {psi.shape}")
        norms = np.linalg.norm(psi, axis=1)
        if norms.max() > 1.0 + 1e-12:
            raise FeatureDegenerate(f"feature row {int(norms.argmax())} has norm {norms.max():.6g} > 1")
        sv = np.linalg.svd(psi, compute_uv=False)
        if psi.shape[1] > psi.shape[0] or sv.min() <= 1e-10 * max(1.0, sv.max()):
            raise FeatureDegenerate("feature columns are linearly dependent")
        if constant_angle(psi) < self.min_angle:
            raise FeatureDegenerate("the all-ones vector is (nearly) in the feature span")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @property
    def d(self) -> int:
        return self.psi.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.psi.shape[0]

    def to_dict(self) -> dict:
        return {"psi": self.psi.tolist(), "min_angle": self.min_angle}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMap":
        return cls(np.asarray(data["psi"], float), data.get("min_angle", 1e-3))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FeatureMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def constant_angle(psi: np.ndarray) -> float:
    """Angle in radians between the all-ones vector and span(psi)."""
    ones = np.ones(psi.shape[0]) / np.sqrt(psi.shape[0])
    q, _ = np.linalg.qr(psi)
    resid = ones - q @ (q.T @ ones)
    return float(np.arcsin(min(1.0, np.linalg.norm(resid))))


def build_tabular_features(mdp: TabularAmdp, d_target: int | None = None, seed: int = 0,
                           kind: str = "exact") -> FeatureMap:
    """Feature builders.

    ``exact``: orthonormal basis of the complement of 1 (d = |S||A| - 1), so
    span(psi) + span(1) is everything and the approximation error vanishes for
    every policy. ``random``: seeded Gaussian matrix with the 1-direction removed,
    scaled so the largest row norm is 1.
    """
    n = mdp.n_pairs
    if kind == "exact":
        if d_target not in (None, n - 1):
            raise FeatureDegenerate(f"exact features have d = {n - 1}, asked for {d_target}")
        # Householder-free construction: QR of [1, I] gives 1 as the first column
        q, _ = np.linalg.qr(np.column_stack([np.ones(n), np.eye(n)[:, : n - 1]]))
        psi = q[:, 1:]
        # rows have norm sqrt(1 - 1/n) <= 1
        return FeatureMap(psi)
    if kind != "random":
        raise ValueError(f"unknown feature kind {kind!r}")
    if d_target is None or not 1 <= d_target < n:
        raise FeatureDegenerate(f"need 1 <= d_target < {n}, got {d_target}")
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((n, d_target))
    psi -= psi.mean(axis=0, keepdims=True)
    if np.linalg.matrix_rank(psi) < d_target:
        raise FeatureDegenerate("random features lost rank after removing the constant direction")
    psi /= np.linalg.norm(psi, axis=1).max()
    return FeatureMap(psi)


def weighting_matrix(nu: np.ndarray, pi) -> np.ndarray:
    """Diagonal of D: entries nu(s) pi(a|s), flattened over (s, a)."""
    return (np.asarray(nu, float)[:, None] * as_probs(pi)).reshape(-1)


def _psi(features) -> np.ndarray:
    return features.psi if isinstance(features, FeatureMap) else np.asarray(features, float)


def deterministic_operator(features, d, p_sa, cost_vec, theta, rho) -> np.ndarray:
    """g(theta, rho) = Psi^T D (Psi theta - P Psi theta - c + rho 1)."""
    psi = _psi(features)
    v = psi @ theta
    return psi.T @ (d * (v - p_sa @ v - cost_vec + rho))


def projected_fixed_point(features, d, p_sa, cost_vec, rho_star) -> np.ndarray:
    """theta* of Psi^T D Psi theta = Psi^T D P Psi theta + Psi^T D (c - rho 1)."""
    psi = _psi(features)
    a = psi.T @ (d[:, None] * (psi - p_sa @ psi))
    b = psi.T @ (d * (cost_vec - rho_star))
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.min() <= 1e-12 * max(1.0, sv.max()):
        raise MonotonicityViolated("projected Bellman system is singular")
    return np.linalg.solve(a, b)


def _support_geometry(psi, d, tol=MU_TOL):
    """Orthonormalized features on the support of D: (support mask, Phi_s)."""
    supp = d > 0
    psi_s = psi[supp]
    b = psi_s.T @ (d[supp, None] * psi_s)
    w, v = np.linalg.eigh(b)
    keep = w > tol * max(1.0, w.max())
    phi_s = psi_s @ (v[:, keep] / np.sqrt(w[keep]))
    return supp, phi_s


def monotonicity_constant(features, d, p_sa, strict: bool = True) -> float:
    """1 - beta = inf over x in span(Psi), ||x||_D = 1 of x^T D (I - P) x.

    Computed as lambda_min of sym(I - M) with M = Phi^T D P Phi. When D is
    singular only the support of D matters: P^pi only reaches pairs the policy
    plays, so directions vanishing on the support have zero D-norm and are
    dropped.
    """
    psi = _psi(features)
    d = np.asarray(d, float)
    supp, phi_s = _support_geometry(psi, d)
    if phi_s.shape[1] == 0:
        raise MonotonicityViolated("features vanish on the support of D")
    m = phi_s.T @ (d[supp, None] * (p_sa[np.ix_(supp, supp)] @ phi_s))
    sym = np.eye(m.shape[0]) - 0.5 * (m + m.T)
    val = float(np.linalg.eigvalsh(sym).min())
    if strict and val <= 1e-12:
        raise MonotonicityViolated(f"monotonicity constant is {val:.3g} (not positive)")
    return val


def perturbed_monotonicity_floor(one_minus_beta: float, alpha: float) -> float:
    """min{27 alpha (1-beta)/32, (1 - alpha (1-beta))/8}; zero when 1-beta is zero."""
    if one_minus_beta <= 0:
        return 0.0
    return min(27.0 * alpha * one_minus_beta / 32.0, (1.0 - alpha * one_minus_beta) / 8.0)


def best_linf_shift(diff: np.ndarray) -> tuple[float, float]:
    """(b, min_b ||diff + b||_inf) by the midpoint rule."""
    hi, lo = float(np.max(diff)), float(np.min(diff))
    return -(hi + lo) / 2.0, (hi - lo) / 2.0


@dataclass(frozen=True, eq=False)
class ProjectedModel:
    d_weights: np.ndarray
    b_gram: np.ndarray
    phi: np.ndarray
    mu: float
    m_matrix: np.ndarray
    theta_star: np.ndarray
    one_minus_beta: float
    rho: float
    q_bar: np.ndarray  # exact Q-bar^pi, flattened
    b_hat: float
    eps_approx: float
    p_sa: np.ndarray
    cost_vec: np.ndarray

    @property
    def q_bar_star(self) -> np.ndarray:
        """D-projection representative Q-bar^pi + b_hat 1."""
        return self.q_bar + self.b_hat

    def d_norm_sq(self, psi: np.ndarray, theta: np.ndarray) -> float:
        """||Psi theta - Psi theta*||_D^2."""
        diff = psi @ (theta - self.theta_star)
        return float(diff @ (self.d_weights * diff))


def projected_model(mdp: TabularAmdp, pi, features: FeatureMap, reg: Regularizer | None = None,
                    pi_weights=None) -> ProjectedModel:
    """Exact linear-FA targets for evaluating ``pi``.

    ``pi_weights`` replaces pi in the diagonal weighting only (D-tilde built from
    nu^pi and a perturbed policy); the transition matrix stays P^pi.
    """
    reg = reg or NO_REG
    probs = as_probs(pi)
    psi = features.psi
    nu = stationary_distribution(induced_state_kernel(mdp, probs))
    d = weighting_matrix(nu, probs if pi_weights is None else as_probs(pi_weights))
    p_sa = induced_state_action_kernel(mdp, probs)
    cost_vec = effective_cost(mdp, probs, reg).reshape(-1)
    dv = differential_values(mdp, probs, reg)
    b = psi.T @ (d[:, None] * psi)
    w, v = np.linalg.eigh(b)
    mu = float(w.min())
    if mu <= MU_TOL:
        raise FeatureDegenerate(f"lambda_min(B) = {mu:.3g}; D is too degenerate for these features")
    b_isqrt = v @ np.diag(1.0 / np.sqrt(w)) @ v.T
    phi = psi @ b_isqrt
    m = phi.T @ (d[:, None] * (p_sa @ phi))
    one_minus_beta = float(np.linalg.eigvalsh(np.eye(len(m)) - 0.5 * (m + m.T)).min())
    if one_minus_beta <= 1e-12:
        raise MonotonicityViolated(f"monotonicity constant is {one_minus_beta:.3g}")
    theta = projected_fixed_point(psi, d, p_sa, cost_vec, dv.rho)
    approx = psi @ theta
    b_hat = float(d @ (approx - dv.q_flat))
    _, eps = best_linf_shift(approx - dv.q_flat)
    return ProjectedModel(d_weights=d, b_gram=b, phi=phi, mu=mu, m_matrix=m, theta_star=theta,
                          one_minus_beta=one_minus_beta, rho=dv.rho, q_bar=dv.q_flat, b_hat=b_hat,
                          eps_approx=eps, p_sa=p_sa, cost_vec=cost_vec)


@dataclass(frozen=True, eq=False)
class NoiseDiagnostics:
    sigma_bar: np.ndarray
    w1: float


def noise_diagnostics(mdp: TabularAmdp, pi_sampling, pi_target, features: FeatureMap,
                      model: ProjectedModel) -> NoiseDiagnostics:
    """Exact covariance of the whitened stochastic operator at theta*.

    xi = ((s,a),(s',a'),c) with (s,a) ~ D (built from ``pi_sampling``),
    s' ~ P(.|s,a), a' ~ pi_target(.|s'); the operator is
    (<psi(s,a) - psi(s',a'), theta*> - c(s,a) + rho*) psi(s,a), whitened by B^{-1/2}.
    """
    psi = features.psi
    nu = stationary_distribution(induced_state_kernel(mdp, pi_target))
    d_samp = weighting_matrix(nu, pi_sampling)
    p_sa = induced_state_action_kernel(mdp, pi_target)
    v = psi @ model.theta_star
    # weight[i, j] = D(i) P^pi(i, j), scalar[i, j] = v_i - v_j - c_i + rho
    weight = d_samp[:, None] * p_sa
    scalar = v[:, None] - v[None, :] - model.cost_vec[:, None] + model.rho
    w, vecs = np.linalg.eigh(model.b_gram)
    phi_rows = psi @ (vecs @ np.diag(1.0 / np.sqrt(w)) @ vecs.T)
    # E[x x^T] with x = scalar * phi_i, enumerated over (i, j)
    row_w = (weight * scalar**2).sum(axis=1)
    second = phi_rows.T @ (row_w[:, None] * phi_rows)
    mean = phi_rows.T @ (weight * scalar).sum(axis=1)
    sigma = second - np.outer(mean, mean)
    sigma = 0.5 * (sigma + sigma.T)
    inv = np.linalg.inv(np.eye(len(model.m_matrix)) - model.m_matrix)
    resid = model.q_bar_star - v
    eps_term = float(resid @ (model.d_weights * resid))
    w1 = 22.0 * float(np.trace(inv @ sigma @ inv.T)) + 4.0 * eps_term / (model.mu * model.one_minus_beta**2)
    return NoiseDiagnostics(sigma_bar=sigma, w1=w1)
