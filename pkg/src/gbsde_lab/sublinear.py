"""Discrete sublinear-expectation engine.

The set of priors behind a G-expectation is realized as per-step constant
volatilities drawn from a finite grid inside ``[sigma_low, sigma_high]``;
the conditional G-expectation is the backward recursion that takes, at
every node, the largest shock-quadrature average over that grid.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import _kernels
from .errors import ConfigurationError, DomainError, ShapeError

__all__ = [
    "VolatilityBounds",
    "NodeFunction",
    "ScenarioLattice",
    "SHOCK_SCHEMES",
    "g_scalar",
    "shock_rule",
    "build_lattice",
    "cond_g_expectation",
    "g_expectation",
    "quadratic_variation_weights",
    "one_step_moments",
    "augmented_g_expectation",
]

SHOCK_SCHEMES = ("binomial", "trinomial", "gauss3")

# positions closer than this (relative to the lattice scale) are one node
MERGE_TOL = 1e-12


@dataclass(frozen=True)
class VolatilityBounds:
    """Volatility ambiguity interval ``0 < sigma_low <= sigma_high``."""

    sigma_low: float
    sigma_high: float

    def __post_init__(self):
        lo, hi = float(self.sigma_low), float(self.sigma_high)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ConfigurationError("volatility bounds must be finite")
        if not 0.0 < lo <= hi:
            raise ConfigurationError(
                f"need 0 < sigma_low <= sigma_high, got ({lo}, {hi})"
            )
        object.__setattr__(self, "sigma_low", lo)
        object.__setattr__(self, "sigma_high", hi)

    @property
    def degenerate(self):
        """True when the interval is a single point (classical case)."""
        return self.sigma_low == self.sigma_high


def g_scalar(a, bounds):
    """Scalar generator ``G(a) = 1/2 (sigma_high^2 a^+ - sigma_low^2 a^-)``.

    Vectorized over ``a``. Non-finite input raises ``DomainError``.
    """
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("g_scalar needs finite input")
    out = 0.5 * (
        bounds.sigma_high ** 2 * np.maximum(arr, 0.0)
        - bounds.sigma_low ** 2 * np.maximum(-arr, 0.0)
    )
    return float(out) if out.ndim == 0 else out


def shock_rule(scheme):
    """Nodes and weights of a symmetric unit-variance one-step quadrature."""
    if scheme == "binomial":
        nodes = np.array([-1.0, 1.0])
        weights = np.array([0.5, 0.5])
    elif scheme == "trinomial":
        r3 = math.sqrt(3.0)
        nodes = np.array([-r3, 0.0, r3])
        weights = np.array([1.0, 4.0, 1.0]) / 6.0
    elif scheme == "gauss3":
        nodes, weights = hermegauss(3)
        weights = weights / weights.sum()
    else:
        raise ConfigurationError(
            f"unknown shock scheme {scheme!r}; choose from {SHOCK_SCHEMES}"
        )
    return nodes, weights


@dataclass(frozen=True)
class NodeFunction:
    """Values of a function on the nodes of one lattice level."""

    level: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64)
        )

    def check(self, lattice, level=None):
        level = self.level if level is None else level
        if self.level != level:
            raise ShapeError(f"node function lives on level {self.level}, need {level}")
        expected = lattice.node_count(level)
        if self.values.shape != (expected,):
            raise ShapeError(
                f"level {level} has {expected} nodes, got values of shape {self.values.shape}"
            )
        return self


def unique_positions(x, scale):
    """Sorted unique positions, merging points closer than ``MERGE_TOL*scale``."""
    s = np.sort(np.asarray(x, dtype=np.float64).ravel())
    if s.size == 0:
        return s
    keep = np.empty(s.size, dtype=bool)
    keep[0] = True
    keep[1:] = np.diff(s) > MERGE_TOL * scale
    return s[keep]


def propagate_levels(start, targets_fn, num_steps, max_nodes, domain, scale,
                     spacing=None, refine=None):
    """Forward construction of per-level node sets.

    Levels are exact reachable sets (merged within tolerance) while they have
    at most ``max_nodes`` nodes; from the first level that overflows, nodes
    are a uniform grid of spacing ``spacing`` (or an automatic choice) that
    covers the reachable range. Targets outside ``domain`` are clamped.

    Returns ``(levels, n_exact, diagnostics)``.
    """
    levels = [unique_positions(start, scale)]
    lo_dom, hi_dom = domain
    n_exact = num_steps + 1
    h = None
    anchor = None
    projections = 0
    max_disp = 0.0
    steps_total = num_steps if refine is None else refine
    for n in range(num_steps):
        src = levels[n]
        tg = np.asarray(targets_fn(n, src), dtype=np.float64)
        if not np.all(np.isfinite(tg)):
            from .errors import StateOverflowError

            bad = np.argwhere(~np.isfinite(tg))[0]
            raise StateOverflowError(
                "non-finite forward state", location={"level": n + 1, "node": int(bad[0])}
            )
        clipped = np.clip(tg, lo_dom, hi_dom)
        moved = np.abs(clipped - tg)
        n_out = int(np.count_nonzero(moved > 0.0))
        if n_out:
            projections += n_out
            max_disp = max(max_disp, float(moved.max()))
        if h is None:
            nxt = unique_positions(clipped, scale)
            if nxt.size <= max_nodes:
                levels.append(nxt)
                continue
            n_exact = n + 1
            moves = np.abs(tg.reshape(src.size, -1) - src[:, None])
            big = float(moves.max()) if moves.size else 0.0
            if spacing is not None:
                h = float(spacing)
            else:
                if big <= 0.0:
                    big = scale * 1e-3
                h = big / (2.0 * math.ceil(math.sqrt(max(steps_total, 1))))
            anchor = float(src[0])
        k_lo = math.floor((clipped.min() - anchor) / h)
        k_hi = math.ceil((clipped.max() - anchor) / h)
        grid = anchor + h * np.arange(k_lo, k_hi + 1, dtype=np.float64)
        grid = grid[(grid >= lo_dom - 1e-12 * scale) & (grid <= hi_dom + 1e-12 * scale)]
        # keep exact end points of the clamped range so nothing extrapolates
        grid = unique_positions(np.concatenate([grid, [clipped.min(), clipped.max()]]), scale)
        levels.append(grid)
    diagnostics = {
        "projections": projections,
        "max_projection_displacement": max_disp,
        "uniform_spacing": h,
        "n_exact_levels": n_exact,
    }
    return levels, n_exact, diagnostics


@dataclass(frozen=True, eq=False)
class ScenarioLattice:
    """Scenario lattice for the canonical process ``B`` started at ``x0``.

    ``levels[n]`` holds the sorted node positions at time ``t0 + n * dt``.
    The first ``n_exact`` levels are exact reachable sets; later ones are
    uniform grids onto which transitions are linearly interpolated.
    """

    bounds: VolatilityBounds
    T: float
    N: int
    vol_grid: np.ndarray
    shock_nodes: np.ndarray
    shock_weights: np.ndarray
    levels: tuple
    n_exact: int
    t0: float = 0.0
    shock_scheme: str = "trinomial"
    domain: tuple = (-np.inf, np.inf)
    diagnostics: dict = field(default_factory=dict)

    @property
    def dt(self):
        return (self.T - self.t0) / self.N

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.N + 1)

    @property
    def scale(self):
        return max(1.0, self.bounds.sigma_high * math.sqrt(self.T - self.t0))

    def node_count(self, level):
        return self.levels[level].size

    def increments(self):
        """Canonical increments, shape (S, K): ``sigma * sqrt(dt) * shock``."""
        return self.vol_grid[:, None] * self.shock_nodes[None, :] * math.sqrt(self.dt)

    def targets(self, level, positions=None):
        """Next-level positions reached from each node, shape (nodes, 1, S, K)."""
        x = self.levels[level] if positions is None else positions
        return x[:, None, None, None] + self.increments()[None, None, :, :]

    def state_coefficients(self, level, positions=None):
        """Control values per (node, slot, dim); a single zero control here."""
        x = self.levels[level] if positions is None else positions
        return np.zeros((x.size, 1, 1))

    def node_function(self, fn, level=None):
        """Sample ``fn(x)`` on a level (default: terminal level)."""
        level = self.N if level is None else level
        return NodeFunction(level, np.broadcast_to(fn(self.levels[level]), self.levels[level].shape).astype(float))


def build_lattice(T, N, bounds, vol_grid_size, shock_scheme="trinomial", *,
                  x0=0.0, t0=0.0, max_nodes=5000, domain_width=6.0, spacing=None):
    """Scenario lattice for ``B`` on ``[t0, T]`` with ``N`` steps.

    ``vol_grid_size`` volatilities are spaced evenly over
    ``[sigma_low, sigma_high]`` (both end points included). The spatial
    domain is ``x0 +/- domain_width * sigma_high * sqrt(T - t0)``.
    """
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ConfigurationError(f"need N >= 1, got {N!r}")
    if not (isinstance(vol_grid_size, (int, np.integer)) and vol_grid_size >= 1):
        raise ConfigurationError(f"need vol_grid_size >= 1, got {vol_grid_size!r}")
    if not (math.isfinite(T) and T > t0):
        raise ConfigurationError(f"need T > t0, got T={T!r}, t0={t0!r}")
    if vol_grid_size == 1 and not bounds.degenerate:
        raise ConfigurationError(
            "vol_grid_size=1 cannot contain both sigma_low and sigma_high"
        )
    if bounds.degenerate:
        vol_grid = np.array([bounds.sigma_high] * 1)
    else:
        vol_grid = np.linspace(bounds.sigma_low, bounds.sigma_high, vol_grid_size)
        vol_grid[0], vol_grid[-1] = bounds.sigma_low, bounds.sigma_high
    nodes, weights = shock_rule(shock_scheme)
    dt = (T - t0) / N
    incr = vol_grid[:, None] * nodes[None, :] * math.sqrt(dt)
    half = domain_width * bounds.sigma_high * math.sqrt(T - t0)
    x0_arr = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    domain = (float(x0_arr.min()) - half, float(x0_arr.max()) + half)
    scale = max(1.0, bounds.sigma_high * math.sqrt(T - t0))

    def targets_fn(n, src):
        return src[:, None, None] + incr[None]

    levels, n_exact, diag = propagate_levels(
        x0_arr, targets_fn, N, max_nodes, domain, scale, spacing=spacing
    )
    return ScenarioLattice(
        bounds=bounds,
        T=float(T),
        N=int(N),
        vol_grid=vol_grid,
        shock_nodes=nodes,
        shock_weights=weights,
        levels=tuple(levels),
        n_exact=n_exact,
        t0=float(t0),
        shock_scheme=shock_scheme,
        domain=domain,
        diagnostics=diag,
    )


def one_step_moments(lattice, level, v_next, targets=None):
    """Shock averages of next-level values for every node/control/scenario.

    Returns ``(E, Eeps, n_clamped)`` with ``E[i, u, s] = sum_k w_k v(target)``
    and ``Eeps[i, u, s] = sum_k w_k eps_k v(target)``.
    """
    if targets is None:
        targets = lattice.targets(level)
    xp = lattice.levels[level + 1]
    j, w, clamped = _kernels.interp_weights(xp, targets, MERGE_TOL * lattice.scale)
    vals = _kernels.gather(np.asarray(v_next, dtype=np.float64), j, w)
    wts = lattice.shock_weights
    E = vals @ wts
    Eeps = vals @ (wts * lattice.shock_nodes)
    return E, Eeps, clamped


def cond_g_expectation(lattice, terminal, running=None):
    """Conditional G-expectation of a terminal node function.

    Returns a list of ``NodeFunction`` indexed by level (``result[n]`` is the
    value at level ``n``; ``result[0]`` holds the G-expectation). ``running``
    optionally adds a per-step payoff: a list over levels ``0..N-1`` of arrays
    of shape (nodes,) or (nodes, S) accumulated inside the supremum.
    """
    if not isinstance(terminal, NodeFunction):
        raise ShapeError("terminal must be a NodeFunction")
    terminal.check(lattice, lattice.N)
    values = [None] * (lattice.N + 1)
    values[lattice.N] = terminal.values.copy()
    for n in range(lattice.N - 1, -1, -1):
        E, _, _ = one_step_moments(lattice, n, values[n + 1])
        cand = E[:, 0, :]
        if running is not None:
            r = np.asarray(running[n], dtype=np.float64)
            cand = cand + (r[:, None] if r.ndim == 1 else r)
        values[n] = cand.max(axis=1)
    return [NodeFunction(n, v) for n, v in enumerate(values)]


def g_expectation(lattice, terminal, running=None):
    """Root value of ``cond_g_expectation`` (first root node)."""
    return float(cond_g_expectation(lattice, terminal, running)[0].values[0])


def quadratic_variation_weights(lattice, sigma):
    """Per-step increment ``sigma^2 * dt`` of the quadratic variation."""
    hit = np.isclose(lattice.vol_grid, sigma, rtol=0.0, atol=1e-12)
    if not hit.any():
        raise DomainError(f"sigma={sigma} is not on the volatility grid {lattice.vol_grid}")
    s = float(lattice.vol_grid[np.argmax(hit)])
    return s * s * lattice.dt


def augmented_g_expectation(lattice, increments, payoff, mode="sum", grid_size=257,
                            start=0.0, node_values=None):
    """G-expectation of a path functional carried by a scalar accumulator.

    ``mode="sum"``: the accumulator starts at ``start`` and moves by
    ``increments[n][i, s]`` (or ``increments[n][i]``) on each step.
    ``mode="max"``: the accumulator is the running maximum of
    ``node_values[n][i]`` along the path (including both end points).
    The terminal payoff is ``payoff(a)``. The recursion runs on the product
    of lattice nodes and a uniform accumulator grid, interpolating linearly
    in both. Returns the value at the first root node.
    """
    N = lattice.N
    S = lattice.vol_grid.size
    if mode == "sum":
        incs = []
        lo = hi = float(start)
        for n in range(N):
            inc = np.asarray(increments[n], dtype=np.float64)
            inc = inc[:, None] if inc.ndim == 1 else inc
            inc = np.broadcast_to(inc, (lattice.node_count(n), S))
            incs.append(inc)
            lo += float(inc.min())
            hi += float(inc.max())
    elif mode == "max":
        vals = [np.asarray(v, dtype=np.float64) for v in node_values]
        allv = np.concatenate([v.ravel() for v in vals] + [[float(start)]])
        lo, hi = float(allv.min()), float(allv.max())
    else:
        raise ConfigurationError(f"unknown accumulator mode {mode!r}")
    if hi - lo < 1e-12:
        hi = lo + 1e-12
    a_grid = np.linspace(lo, hi, grid_size)
    W = np.tile(np.asarray(payoff(a_grid), dtype=np.float64), (lattice.node_count(N), 1))
    tol = MERGE_TOL * lattice.scale
    for n in range(N - 1, -1, -1):
        tg = lattice.targets(n)[:, 0]
        j, wx, _ = _kernels.interp_weights(lattice.levels[n + 1], tg, tol)
        m0 = lattice.node_count(n)
        if mode == "sum":
            a_new = a_grid[None, None, :] + incs[n][:, :, None]
        else:
            # fold the next node's value into the accumulator before the step
            W = _rows_at(W, np.maximum(a_grid[None, :], vals[n + 1][:, None]), a_grid)
            a_new = np.broadcast_to(a_grid[None, None, :], (m0, S, grid_size))
        W = _kernels.augmented_step(W, j, wx, np.ascontiguousarray(a_new), a_grid,
                                    lattice.shock_weights)
    a0 = float(start) if mode == "sum" else max(float(start), float(vals[0][0]))
    return float(np.interp(a0, a_grid, W[0]))


def _rows_at(W, a, a_grid):
    """Row-wise linear interpolation of ``W[i]`` (on ``a_grid``) at ``a[i]``."""
    j, w, _ = _kernels.interp_weights(a_grid, a, 0.0)
    lo = np.take_along_axis(W, j, axis=1)
    hi = np.take_along_axis(W, np.minimum(j + 1, a_grid.size - 1), axis=1)
    return (1.0 - w) * lo + w * hi
