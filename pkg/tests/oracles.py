"""Independent reference computations used by the tests.

Everything here works on the raw path tree (no node merging, no
interpolation) or on dense grids, and shares no code with the package
beyond the shock quadrature constants.
"""
import itertools
import math

import numpy as np
from scipy.optimize import brentq, minimize_scalar

R3 = math.sqrt(3.0)
SHOCKS = {
    "binomial": (np.array([-1.0, 1.0]), np.array([0.5, 0.5])),
    "trinomial": (np.array([-R3, 0.0, R3]), np.array([1.0, 4.0, 1.0]) / 6.0),
}


def vol_grid(lo, hi, size):
    if lo == hi:
        return np.array([hi])
    return np.linspace(lo, hi, size)


def tree_g_expectation(x0, T, N, vols, scheme, payoff):
    """Root value of ``sup`` over adapted volatility choices, by full path-tree recursion."""
    eps, w = SHOCKS[scheme]
    inc = (np.asarray(vols)[:, None] * eps[None, :] * math.sqrt(T / N)).ravel()
    xs = np.array([float(x0)])
    for _ in range(N):
        xs = (xs[:, None] + inc[None, :]).ravel()
    v = np.asarray(payoff(xs), dtype=np.float64)
    S, K = len(vols), eps.size
    for _ in range(N):
        v = (v.reshape(-1, S, K) @ w).max(axis=1)
    return float(v[0])


def brute_force_adapted_sup(x0, T, N, vols, scheme, payoff):
    """Enumerate every adapted volatility selection explicitly (tiny trees only).

    A selection assigns a scenario to each internal tree node, identified by
    its path of ``(scenario, shock)`` pairs from the root.
    """
    eps, w = SHOCKS[scheme]
    sq = math.sqrt(T / N)
    S, K = len(vols), eps.size
    steps = [(s, k) for s in range(S) for k in range(K)]
    paths = [p for n in range(N) for p in itertools.product(steps, repeat=n)]
    best = -np.inf
    for choice in itertools.product(range(S), repeat=len(paths)):
        sel = dict(zip(paths, choice))

        def value(path, x):
            if len(path) == N:
                return float(payoff(np.array([x]))[0])
            s = sel[path]
            return sum(w[k] * value(path + ((s, k),), x + vols[s] * eps[k] * sq) for k in range(K))
        best = max(best, value((), float(x0)))
    return best


def _solve_scalar(fun, guess):
    """Root of the increasing function ``fun`` by bracketing and Brent's method."""
    lo, hi = guess - 1.0, guess + 1.0
    for _ in range(200):
        if fun(lo) <= 0.0:
            break
        lo -= 2.0 * (hi - lo)
    for _ in range(200):
        if fun(hi) >= 0.0:
            break
        hi += 2.0 * (hi - lo)
    return brentq(fun, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def tree_control_value(x0, t0, T, N, vols, scheme, terminal, f, g, controls, b=None, h=None, sigma=None):
    """``min_u max_s`` G-BSDE value on the raw path tree.

    ``controls`` is a (U, dim) array; ``b, h, sigma`` are ``fn(t, x, u_row)``
    (defaults 0, 0, 1); ``f, g`` are ``fn(t, x, y, z, u_row)`` on scalars.
    Each node solves ``y = max_s [E_s + f(y, z_s) dt + g(y, z_s) s^2 dt]``
    with Brent's method, independently per control, then takes the min.
    """
    eps, w = SHOCKS[scheme]
    b = b or (lambda t, x, u: 0.0)
    h = h or (lambda t, x, u: 0.0)
    sigma = sigma or (lambda t, x, u: 1.0)
    controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    dt = (T - t0) / N
    sq = math.sqrt(dt)

    def node(level, x):
        t = t0 + level * dt
        if level == N:
            return float(terminal(x))
        best = np.inf
        for u in controls:
            bb, hh, ss = b(t, x, u), h(t, x, u), sigma(t, x, u)
            E, Z = [], []
            for s in vols:
                vals = [node(level + 1, x + bb * dt + hh * s * s * dt + ss * s * e * sq) for e in eps]
                E.append(float(np.dot(w, vals)))
                Z.append(float(np.dot(w * eps, vals)) / (s * sq))

            def resid(y):
                return y - max(E[i] + f(t, x, y, Z[i], u) * dt + g(t, x, y, Z[i], u) * s * s * dt
                               for i, s in enumerate(vols))
            y = _solve_scalar(resid, max(E))
            best = min(best, y)
        return best

    return node(0, float(x0))


def enumerate_feedback_policies(x0, T, N, vols, scheme, terminal, f, controls, sigma):
    """Minimum over all adapted control choices of the G-BSDE value, by explicit enumeration.

    Intended for ``N <= 2``: every internal tree node gets its own control.
    ``g`` is zero here; ``f(t, x, y, z, u)``.
    """
    eps, w = SHOCKS[scheme]
    controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    dt = T / N
    sq = math.sqrt(dt)
    S, K, U = len(vols), eps.size, len(controls)

    def evaluate(assign):
        it = iter(assign)

        def node(level, x):
            if level == N:
                return float(terminal(x))
            u = controls[next(it)]
            t = level * dt
            E, Z = [], []
            for s in vols:
                vals = [node(level + 1, x + sigma(t, x, u) * s * e * sq) for e in eps]
                E.append(float(np.dot(w, vals)))
                Z.append(float(np.dot(w * eps, vals)) / (s * sq))

            def resid(y):
                return y - max(E[i] + f(t, x, y, Z[i], u) * dt for i in range(S))
            return _solve_scalar(resid, max(E))
        return node(0, float(x0))

    internal = sum((S * K) ** n for n in range(N))
    return min(evaluate(a) for a in itertools.product(range(U), repeat=internal))


def dense_inf_convolution(phi, n, y, radius, points=200_001):
    """``min_q phi(q) + n |y - q|`` on a dense grid, polished with a bounded scalar search."""
    q = y + np.linspace(-radius, radius, points)
    vals = phi(q) + n * np.abs(y - q)
    i = int(np.argmin(vals))
    step = q[1] - q[0]
    lo, hi = q[max(i - 2, 0)], q[min(i + 2, points - 1)]
    res = minimize_scalar(lambda s: float(phi(np.array([s]))[0] + n * abs(y - s)), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-13})
    return min(float(vals[i]), float(res.fun)), step


def classical_explicit_hjb_step(V, dx, dt, sigma, b, f_of_v):
    """Textbook explicit step for ``V_t + 1/2 sigma^2 V_xx + b V_x + f(V) = 0`` (upwind drift)."""
    out = V.copy()
    d2 = (V[2:] - 2 * V[1:-1] + V[:-2]) / dx ** 2
    d1 = np.where(b >= 0, (V[2:] - V[1:-1]) / dx, (V[1:-1] - V[:-2]) / dx)
    out[1:-1] = V[1:-1] + dt * (0.5 * sigma ** 2 * d2 + b * d1 + f_of_v(V[1:-1]))
    out[0] = 2 * out[1] - out[2]
    out[-1] = 2 * out[-2] - out[-3]
    return out
