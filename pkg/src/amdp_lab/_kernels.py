"""Compiled inner loops for Markovian sampling and the VRTD inner iteration.

Every routine consumes pre-drawn uniforms so that the Python per-call path and
the compiled batch path read the same random stream. Categorical draws use
alias tables: one uniform picks a column and its fractional part decides
between the column and its alias.

One skipped tuple advances tau transitions and records (s, a) and the next
pair (s', a'). The recorded action a is drawn from the table (rq, ra), which is
the behaviour policy's own table unless the caller perturbs it. It consumes
2 (tau + 1) uniforms, plus one when tau == 0 and ``perturb`` is set (the
current action is redrawn).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def draw(cdf, u):
    n = cdf.shape[0]
    for i in range(n):
        if u < cdf[i]:
            return i
    return n - 1


@njit(cache=True)
def build_alias(probs, q, alias):
    """Vose alias table for each row of a 2-D array of probability rows."""
    n_rows, n = probs.shape
    small = np.empty(n, np.int64)
    large = np.empty(n, np.int64)
    for r in range(n_rows):
        scaled = probs[r] * n / probs[r].sum()
        ns = 0
        nl = 0
        for i in range(n):
            if scaled[i] < 1.0:
                small[ns] = i
                ns += 1
            else:
                large[nl] = i
                nl += 1
        while ns > 0 and nl > 0:
            ns -= 1
            s = small[ns]
            nl -= 1
            g = large[nl]
            q[r, s] = scaled[s]
            alias[r, s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            if scaled[g] < 1.0:
                small[ns] = g
                ns += 1
            else:
                large[nl] = g
                nl += 1
        for k in range(nl):
            q[r, large[k]] = 1.0
            alias[r, large[k]] = large[k]
        for k in range(ns):
            # rounding leftovers; a zero-probability column must never be returned
            if probs[r, small[k]] > 0:
                q[r, small[k]] = 1.0
                alias[r, small[k]] = small[k]
            else:
                q[r, small[k]] = 0.0
                alias[r, small[k]] = np.argmax(probs[r])


@njit(cache=True, inline="always")
def draw_next_state(kq, ka, s, a, u):
    n = kq.shape[2]
    x = u * n
    i = min(int(x), n - 1)
    if x - i < kq[s, a, i]:
        return i
    return ka[s, a, i]


@njit(cache=True, inline="always")
def draw_action(pq, pa, s, u):
    n = pq.shape[1]
    x = u * n
    i = min(int(x), n - 1)
    if x - i < pq[s, i]:
        return i
    return pa[s, i]


@njit(cache=True)
def sample_tuples(s, a, kq, ka, pq, pa, rq, ra, perturb, u, tau, n, out):
    """Fill ``out[i] = (s, a, s', a')`` for n successive skipped tuples."""
    pos = 0
    for i in range(n):
        if tau == 0:
            if perturb:
                a = draw_action(rq, ra, s, u[pos])
                pos += 1
        else:
            for t in range(tau):
                s = draw_next_state(kq, ka, s, a, u[pos])
                if t == tau - 1:
                    a = draw_action(rq, ra, s, u[pos + 1])
                else:
                    a = draw_action(pq, pa, s, u[pos + 1])
                pos += 2
        out[i, 0] = s
        out[i, 1] = a
        s = draw_next_state(kq, ka, s, a, u[pos])
        a = draw_action(pq, pa, s, u[pos + 1])
        pos += 2
        out[i, 2] = s
        out[i, 3] = a
    return s, a


@njit(cache=True)
def rollout_path(s, a, kq, ka, pq, pa, u, n, out):
    """Record (s_t, a_t) for t < n, advancing one transition after each record."""
    pos = 0
    for t in range(n):
        out[t, 0] = s
        out[t, 1] = a
        s = draw_next_state(kq, ka, s, a, u[pos])
        a = draw_action(pq, pa, s, u[pos + 1])
        pos += 2
    return s, a


@njit(cache=True)
def vrtd_inner(psi, n_actions, s, a, kq, ka, pq, pa, rq, ra, perturb, u, tau, n_steps,
               eta, theta, theta_tilde, ghat, acc):
    """n_steps variance-reduced TD updates in place on ``theta``.

    theta <- theta - eta (<psi(s,a) - psi(s',a'), theta - theta_tilde> psi(s,a) + ghat)
    with one skipped tuple per step. ``acc`` accumulates the iterates before each
    update. Returns (s, a, bad_step) with bad_step = -1 when every iterate stayed
    finite.
    """
    d = psi.shape[1]
    pos = 0
    for step in range(n_steps):
        for j in range(d):
            acc[j] += theta[j]
        if tau == 0:
            if perturb:
                a = draw_action(rq, ra, s, u[pos])
                pos += 1
        else:
            for t in range(tau):
                s = draw_next_state(kq, ka, s, a, u[pos])
                if t == tau - 1:
                    a = draw_action(rq, ra, s, u[pos + 1])
                else:
                    a = draw_action(pq, pa, s, u[pos + 1])
                pos += 2
        i0 = s * n_actions + a
        s = draw_next_state(kq, ka, s, a, u[pos])
        a = draw_action(pq, pa, s, u[pos + 1])
        pos += 2
        i1 = s * n_actions + a
        diff = 0.0
        for j in range(d):
            diff += (psi[i0, j] - psi[i1, j]) * (theta[j] - theta_tilde[j])
        if not np.isfinite(diff):
            return s, a, step
        for j in range(d):
            theta[j] -= eta * (diff * psi[i0, j] + ghat[j])
    return s, a, -1
