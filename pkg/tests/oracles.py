"""Independent reference computations used by the tests.

None of these reuse the analytic code paths they check: FIMs come from
finite differences of the noiseless signal, SDP optima from projected
gradient on the original (non-epigraph) problem, LASSO optima from a slow
subgradient-free coordinate method.
"""

import numpy as np

from beamloc.geometry import ChannelParams, PositionParams, pos_to_channel
from beamloc.sdp import LmiBlock, SdpProblem
from beamloc.waveform import noiseless_signal


def _fim_from_jac(D, noise_var):
    D = D.reshape(D.shape[0], -1)
    return (2.0 / noise_var) * np.real(D.conj() @ D.T)


def fd_channel_fim(X, ch: ChannelParams, noise_var, rel=1e-6):
    """FIM of (tau, thT, thR, |h|, arg h) per path from central differences."""
    L = ch.n_paths
    base = np.column_stack([ch.delays, ch.aod, ch.aoa, np.abs(ch.gains), np.angle(ch.gains)])

    def signal(v):
        v = v.reshape(L, 5)
        return noiseless_signal(X, ChannelParams(v[:, 0], v[:, 1], v[:, 2],
                                                 v[:, 3] * np.exp(1j * v[:, 4])))

    scale = np.tile([1e-9, 1.0, 1.0, max(np.abs(ch.gains).max(), 1e-12), 1.0], L)
    D = []
    v0 = base.ravel()
    for i in range(v0.size):
        step = rel * scale[i]
        e = np.zeros_like(v0)
        e[i] = step
        D.append((signal(v0 + e) - signal(v0 - e)) / (2 * step))
    return _fim_from_jac(np.array(D), noise_var)


def fd_observation_fim(X, nu: PositionParams, noise_var, rel=1e-6):
    """FIM in the position parameterization from central differences."""
    v0 = nu.to_vector()
    scale = np.ones_like(v0)
    scale[3] = 1e-9
    for i in [4] + [6 + 4 * (l - 1) + 2 for l in range(1, nu.n_paths)]:
        scale[i] = max(abs(v0[i]), 1e-12)

    def signal(v):
        p = PositionParams.from_vector(v)
        return noiseless_signal(X, pos_to_channel(p))

    D = []
    for i in range(v0.size):
        step = rel * scale[i]
        e = np.zeros_like(v0)
        e[i] = step
        D.append((signal(v0 + e) - signal(v0 - e)) / (2 * step))
    return _fim_from_jac(np.array(D), noise_var)


# ---------------------------------------------------------------- design SDPs

def design_sdp(a, E, ridge, budget=1.0, upper=None):
    """Epigraph SDP of min_q trace(E^T (ridge I + sum q_k a_k a_k^T)^-1 E).

    Variables: q (m), then the upper triangle of B (k x k). Constraints
    q >= 0, sum q <= budget, optional q <= upper, and
    [[B, E^T], [E, J(q)]] >= 0.
    """
    m, n = a.shape
    k = E.shape[1]
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    nv = m + len(pairs)
    c = np.r_[np.zeros(m), [1.0 if i == j else 0.0 for i, j in pairs]]
    size = k + n
    F0 = np.zeros((size, size))
    F0[:k, k:] = E.T
    F0[k:, :k] = E
    F0[k:, k:] = ridge * np.eye(n)
    coef = []
    for r in range(m):
        M = np.zeros((size, size))
        M[k:, k:] = np.outer(a[r], a[r])
        coef.append(M)
    for i, j in pairs:
        M = np.zeros((size, size))
        M[i, j] = M[j, i] = 1.0
        coef.append(M)
    G = [-np.eye(m, nv), np.r_[np.ones(m), np.zeros(len(pairs))][None]]
    h = [np.zeros(m), [budget]]
    if upper is not None:
        G.append(np.eye(m, nv))
        h.append(np.asarray(upper, float))
    return SdpProblem(c, [LmiBlock(F0, np.arange(nv), np.array(coef))], np.vstack(G),
                      np.concatenate(h))


def design_objective(q, a, E, ridge):
    J = ridge * np.eye(a.shape[1]) + (a.T * q) @ a
    return float(np.trace(E.T @ np.linalg.solve(J, E)))


def _project_capped_simplex(v, budget, upper):
    """Euclidean projection onto {0 <= q <= upper, sum q <= budget} by bisection."""
    up = np.full_like(v, np.inf) if upper is None else np.asarray(upper, float)
    q = np.clip(v, 0, up)
    if q.sum() <= budget:
        return q
    lo, hi = 0.0, float(np.max(v))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0, up).sum() > budget:
            lo = mid
        else:
            hi = mid
    return np.clip(v - hi, 0, up)


def pg_design_oracle(a, E, ridge, budget=1.0, upper=None, iters=20000, tol=1e-13):
    """Accelerated projected gradient with backtracking on the design objective."""
    m = a.shape[0]
    q = np.full(m, budget / m)
    if upper is not None:
        q = np.minimum(q, upper)
    y, t, step = q.copy(), 1.0, 1.0
    f = design_objective(q, a, E, ridge)

    def grad(x):
        J = ridge * np.eye(a.shape[1]) + (a.T * x) @ a
        Z = np.linalg.solve(J, E)
        return -np.sum((a @ Z) ** 2, axis=1)

    for _ in range(iters):
        g = grad(y)
        fy = design_objective(y, a, E, ridge)
        while True:
            cand = _project_capped_simplex(y - step * g, budget, upper)
            d = cand - y
            fc = design_objective(cand, a, E, ridge)
            if fc <= fy + g @ d + 0.5 / step * d @ d + 1e-15 * abs(fy):
                break
            step *= 0.5
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if fc > f:  # restart momentum
            y, t = q.copy(), 1.0
            continue
        y = cand + (t - 1) / t_new * (cand - q)
        done = abs(f - fc) <= tol * abs(fc)
        q, f, t = cand, fc, t_new
        step *= 1.5
        if done:
            break
    return q, f


# ---------------------------------------------------------------- LASSO

def cd_lasso_oracle(Cm, y, chi, sweeps=20000, tol=1e-15):
    """Exact cyclic coordinate minimization of 0.5||y - C h||^2 + chi ||h||_1."""
    n = Cm.shape[1]
    h = np.zeros(n, complex)
    r = y.copy()
    norms = np.sum(np.abs(Cm) ** 2, axis=0)
    prev = np.inf
    for _ in range(sweeps):
        for i in range(n):
            r += h[i] * Cm[:, i]
            a = np.vdot(Cm[:, i], r)
            s = abs(a)
            h[i] = 0 if s <= chi else a * (1 - chi / s) / norms[i]
            r -= h[i] * Cm[:, i]
        obj = 0.5 * np.real(np.vdot(r, r)) + chi * np.sum(np.abs(h))
        if prev - obj <= tol * obj:
            break
        prev = obj
    return h, obj
