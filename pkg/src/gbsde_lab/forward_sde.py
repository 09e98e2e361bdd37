"""Controlled forward SDE on the scenario lattice.

The state moves by an Euler step whose Brownian part is the canonical
increment ``sigma_scen * shock * sqrt(dt)`` of the scenario lattice, and
whose ``d<B>`` part is ``h * sigma_scen^2 * dt``.
"""
from dataclasses import dataclass, field
import itertools
import math

import numpy as np

from .errors import ConfigurationError, StateOverflowError
from .sublinear import (
    NodeFunction,
    VolatilityBounds,
    build_lattice,
    cond_g_expectation,
    augmented_g_expectation,
    propagate_levels,
    shock_rule,
)

__all__ = [
    "StateDynamics",
    "ControlGrid",
    "StateLattice",
    "step_state",
    "build_state_lattice",
    "constant_policy",
    "moment_check",
    "sample_paths",
]


def _zero_coef(t, x, u):
    return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x), np.shape(u)[:-1] if np.ndim(u) else ()))


def _one_coef(t, x, u):
    return _zero_coef(t, x, u) + 1.0


@dataclass(frozen=True)
class StateDynamics:
    """Coefficients ``b``, ``h``, ``sigma`` as ``fn(t, x, u)``.

    ``u`` carries control components on a trailing axis; all three must
    broadcast over leading axes.
    """

    b: object = _zero_coef
    h: object = _zero_coef
    sigma: object = _one_coef
    name: str = "custom"

    def coefficients(self, t, x, u):
        shape = np.broadcast_shapes(np.shape(t), np.shape(x), np.shape(u)[:-1])
        b = np.broadcast_to(np.asarray(self.b(t, x, u), dtype=np.float64), shape)
        h = np.broadcast_to(np.asarray(self.h(t, x, u), dtype=np.float64), shape)
        s = np.broadcast_to(np.asarray(self.sigma(t, x, u), dtype=np.float64), shape)
        return b, h, s

    @classmethod
    def constant(cls, b=0.0, h=0.0, sigma=1.0):
        b, h, sigma = float(b), float(h), float(sigma)
        return cls(
            b=lambda t, x, u: _zero_coef(t, x, u) + b,
            h=lambda t, x, u: _zero_coef(t, x, u) + h,
            sigma=lambda t, x, u: _zero_coef(t, x, u) + sigma,
            name=f"constant(b={b}, h={h}, sigma={sigma})",
        )

    @classmethod
    def control_volatility(cls, index=0):
        """``dX = u dB``: the control is the diffusion coefficient."""
        return cls(sigma=lambda t, x, u: _zero_coef(t, x, u) + np.asarray(u)[..., index],
                   name="control_volatility")

    @classmethod
    def geometric(cls, drift=0.05, vol=1.0):
        return cls(b=lambda t, x, u: _zero_coef(t, x, u) + drift * np.asarray(x),
                   sigma=lambda t, x, u: _zero_coef(t, x, u) + vol * np.asarray(x),
                   name=f"geometric(drift={drift}, vol={vol})")

    @classmethod
    def wealth(cls, r=0.0, b_rate=0.05, vol=0.2, pi_index=0, c_index=1):
        """Wealth ``dW = [r W + (b - r) pi W - c] dt + vol pi W dB``."""
        def b(t, x, u):
            u = np.asarray(u)
            return r * x + (b_rate - r) * u[..., pi_index] * x - u[..., c_index]

        def sigma(t, x, u):
            return vol * np.asarray(u)[..., pi_index] * x

        return cls(b=lambda t, x, u: _zero_coef(t, x, u) + b(t, x, u),
                   sigma=lambda t, x, u: _zero_coef(t, x, u) + sigma(t, x, u),
                   name=f"wealth(r={r}, b={b_rate}, vol={vol})")


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Finite control set; ``points`` has shape (count, dim)."""

    points: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigurationError("control grid must be a nonempty (count, dim) array")
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError("control grid contains non-finite values")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_intervals(cls, intervals, points_per_factor=9):
        """Product grid with ``points_per_factor`` evenly spaced points per interval.

        A degenerate interval ``(a, a)`` contributes the single point ``a``.
        """
        axes = []
        for lo, hi in intervals:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigurationError(f"bad control interval {(lo, hi)}")
            k = 1 if lo == hi else max(2, int(points_per_factor))
            axes.append(np.linspace(lo, hi, k))
        pts = np.array(list(itertools.product(*axes)), dtype=np.float64)
        return cls(pts)

    @classmethod
    def singleton(cls, *values):
        return cls(np.array([values], dtype=np.float64))

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def subset(self, indices):
        return ControlGrid(self.points[np.asarray(indices, dtype=np.int64)])


def constant_policy(index):
    """Feedback policy that always picks control ``index``."""
    index = int(index)

    def policy(level, x):
        return np.full(np.shape(x), index, dtype=np.int64)

    policy.constant = index
    return policy


def step_state(x, t, u, sigma_scen, shock, dyn, dt):
    """One Euler step of the controlled state.

    ``x + b dt + h sigma_scen^2 dt + sigma sigma_scen shock sqrt(dt)``.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    b, h, s = dyn.coefficients(t, x, u)
    out = x + b * dt + h * sigma_scen ** 2 * dt + s * sigma_scen * shock * math.sqrt(dt)
    if not np.all(np.isfinite(out)):
        raise StateOverflowError("non-finite state after Euler step",
                                 location={"t": float(np.asarray(t).flat[0]), "x": np.asarray(x).tolist()})
    return out


@dataclass(frozen=True, eq=False)
class StateLattice:
    """Node sets of the controlled state, one sorted array per level.

    With ``policy=None`` every control is available at every node (the
    targets have one slot per control); otherwise the policy picks one
    control per node and the control axis has length one.
    """

    dynamics: StateDynamics
    controls: ControlGrid
    bounds: VolatilityBounds
    T: float
    N: int
    t0: float
    vol_grid: np.ndarray
    shock_nodes: np.ndarray
    shock_weights: np.ndarray
    levels: tuple
    n_exact: int
    domain: tuple
    policy: object = None
    x0: tuple = (0.0,)
    shock_scheme: str = "trinomial"
    diagnostics: dict = field(default_factory=dict)
    build_options: dict = field(default_factory=dict)

    @property
    def dt(self):
        return (self.T - self.t0) / self.N

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.N + 1)

    @property
    def scale(self):
        return max(1.0, (self.domain[1] - self.domain[0]) / 12.0)

    def node_count(self, level):
        return self.levels[level].size

    def control_indices(self, level, positions=None):
        """Control index per (node, slot): shape (nodes, U)."""
        x = self.levels[level] if positions is None else positions
        if self.policy is None:
            return np.broadcast_to(np.arange(self.controls.size), (x.size, self.controls.size))
        idx = np.asarray(self.policy(level, x), dtype=np.int64).reshape(x.size, 1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.controls.size):
            raise ConfigurationError("policy returned a control index outside the grid")
        return idx

    def state_coefficients(self, level, positions=None):
        """Control values per (node, slot, dim)."""
        return self.controls.points[self.control_indices(level, positions)]

    def targets(self, level, positions=None):
        """Next-level positions, shape (nodes, U, S, K)."""
        x = self.levels[level] if positions is None else positions
        return _targets(self.dynamics, self.times[level], x, self.state_coefficients(level, x),
                        self.vol_grid, self.shock_nodes, self.dt, level)

    def node_function(self, fn, level=None):
        level = self.N if level is None else level
        vals = np.broadcast_to(np.asarray(fn(self.levels[level]), dtype=np.float64), self.levels[level].shape)
        return NodeFunction(level, vals.copy())

    def rebuilt(self, **changes):
        """Same construction with some arguments replaced (x0, N, policy, ...)."""
        opts = dict(self.build_options)
        opts.update(changes)
        return build_state_lattice(**opts)


def _targets(dyn, t, x, uvals, vol_grid, shock_nodes, dt, level):
    xx = x[:, None]
    b, h, s = dyn.coefficients(t, xx, uvals)
    s2 = vol_grid ** 2
    drift = (b[..., None] + h[..., None] * s2) * dt
    diff = s[..., None] * vol_grid * math.sqrt(dt)
    out = xx[..., None, None] + drift[..., None] + diff[..., None] * shock_nodes
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise StateOverflowError("non-finite forward state",
                                 location={"level": level, "node": int(bad[0]), "x": float(x[bad[0]])})
    return out


def _coefficient_bounds(dyn, controls, t0, T, lo, hi, s2):
    ts = np.linspace(t0, T, 5)
    xs = np.linspace(lo, hi, 65)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    tt = tt.reshape(-1, 1)
    xx = xx.reshape(-1, 1)
    u = controls.points[None, :, :]
    b, h, s = dyn.coefficients(tt, xx, u)
    drift = np.abs(b[..., None] + h[..., None] * s2)
    return float(np.max(np.abs(s))), float(np.max(drift))


def build_state_lattice(dynamics, controls, bounds, T, N, x0, *, policy=None, t0=0.0,
                        vol_grid_size=2, shock_scheme="trinomial", max_nodes=4000,
                        domain=None, domain_width=6.0, spacing=None):
    """Forward-propagate the state from ``x0`` at ``t0`` to ``T``.

    ``policy`` is ``None`` (all controls at every node), an int (constant
    control) or a callable ``(level, x) -> index array``. Targets outside
    the truncated domain are projected onto it; the count and the largest
    displacement are in ``diagnostics``. ``x0`` may be an array of start
    points (all at level 0).
    """
    if isinstance(controls, (list, tuple, np.ndarray)):
        controls = ControlGrid(np.asarray(controls, dtype=np.float64))
    if isinstance(policy, (int, np.integer)):
        policy = constant_policy(policy)
    domain_arg = domain
    base = build_lattice(T, N, bounds, vol_grid_size, shock_scheme, t0=t0, max_nodes=1)
    vol_grid, nodes, weights = base.vol_grid, base.shock_nodes, base.shock_weights
    dt = (T - t0) / N
    x0_arr = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    if domain is None:
        width = domain_width * bounds.sigma_high * math.sqrt(T - t0)
        lo, hi = float(x0_arr.min()), float(x0_arr.max())
        probe = width * max(1.0, abs(lo), abs(hi))
        smax, dmax = _coefficient_bounds(dynamics, controls, t0, T, lo - probe, hi + probe, vol_grid ** 2)
        half = width * max(smax, 1e-12) + (T - t0) * dmax
        half = max(half, 1e-9)
        domain = (lo - half, hi + half)
    else:
        domain = (float(domain[0]), float(domain[1]))
        if not domain[0] < domain[1]:
            raise ConfigurationError(f"domain must be an increasing pair, got {domain}")
    scale = max(1.0, (domain[1] - domain[0]) / 12.0)
    times = t0 + dt * np.arange(N + 1)
    tmp_controls = controls

    def targets_fn(n, src):
        if policy is None:
            idx = np.broadcast_to(np.arange(tmp_controls.size), (src.size, tmp_controls.size))
        else:
            idx = np.asarray(policy(n, src), dtype=np.int64).reshape(src.size, 1)
        return _targets(dynamics, times[n], src, tmp_controls.points[idx], vol_grid, nodes, dt, n)

    levels, n_exact, diag = propagate_levels(x0_arr, targets_fn, N, max_nodes, domain, scale,
                                             spacing=spacing)
    options = dict(dynamics=dynamics, controls=controls, bounds=bounds, T=T, N=N, x0=x0,
                   policy=policy, t0=t0, vol_grid_size=vol_grid_size, shock_scheme=shock_scheme,
                   max_nodes=max_nodes, domain=domain_arg,
                   domain_width=domain_width, spacing=spacing)
    return StateLattice(
        dynamics=dynamics, controls=controls, bounds=bounds, T=float(T), N=int(N), t0=float(t0),
        vol_grid=vol_grid, shock_nodes=nodes, shock_weights=weights, levels=tuple(levels),
        n_exact=n_exact, domain=domain, policy=policy, x0=tuple(x0_arr.tolist()),
        shock_scheme=shock_scheme, diagnostics=diag, build_options=options,
    )


def _pair_tree_moment(lat_a, x_a, x_b, p):
    """Max over adapted scenarios of E|X_a - X_b|^p at every level, by full tree."""
    dyn, dt = lat_a.dynamics, lat_a.dt
    S, K = lat_a.vol_grid.size, lat_a.shock_nodes.size
    w = lat_a.shock_weights
    times = lat_a.times

    def policy_u(level, x):
        return lat_a.state_coefficients(level, np.atleast_1d(x))[:, 0]

    def rec(level, xa, xb, horizon):
        if level == horizon:
            return np.abs(xa - xb) ** p
        ua = policy_u(level, xa)
        ub = policy_u(level, xb)
        ta = _targets(dyn, times[level], xa, ua[:, None], lat_a.vol_grid, lat_a.shock_nodes, dt, level)[:, 0]
        tb = _targets(dyn, times[level], xb, ub[:, None], lat_a.vol_grid, lat_a.shock_nodes, dt, level)[:, 0]
        vals = rec(level + 1, ta.reshape(-1), tb.reshape(-1), horizon).reshape(xa.size, S, K)
        return (vals @ w).max(axis=1)

    return [float(rec(0, np.array([x_a]), np.array([x_b]), m)[0]) for m in range(1, lat_a.N + 1)]


def _pair_mc_moment(lat_a, x_a, x_b, p, paths, seed):
    rng = np.random.default_rng(seed)
    dyn, dt = lat_a.dynamics, lat_a.dt
    S = lat_a.vol_grid.size
    best = np.zeros(lat_a.N)
    # extreme constant scenarios plus random scenario sequences
    scen_sets = [np.full((paths, lat_a.N), s) for s in range(S)]
    scen_sets.append(rng.integers(0, S, size=(paths, lat_a.N)))
    for scen in scen_sets:
        shocks = rng.choice(lat_a.shock_nodes, size=(paths, lat_a.N), p=lat_a.shock_weights)
        xa = np.full(paths, x_a)
        xb = np.full(paths, x_b)
        for n in range(lat_a.N):
            sig = lat_a.vol_grid[scen[:, n]]
            ua = lat_a.state_coefficients(n, xa)[:, 0]
            ub = lat_a.state_coefficients(n, xb)[:, 0]
            xa = step_state(xa, lat_a.times[n], ua, sig, shocks[:, n], dyn, dt)
            xb = step_state(xb, lat_a.times[n], ub, sig, shocks[:, n], dyn, dt)
            best[n] = max(best[n], float(np.mean(np.abs(xa - xb) ** p)))
    return best.tolist()


def moment_check(lattice, p=2, zetas=(1.0, 2.0, 4.0), tree_limit=200_000, mc_paths=4000, seed=0):
    """Fit the constants of the three state estimates over a ladder of starts.

    With the lattice's dynamics, controls and policy, for each start ``zeta``
    (and each horizon ``delta`` on the lattice):

    * ``C1``: ``E[|X^zeta - X^zeta'|^2] <= C1 |zeta - zeta'|^2`` for pairs
      under the same policy (full scenario tree when small, else seeded
      Monte Carlo over extreme and random scenarios);
    * ``C2``: ``E[|X_delta|^p] <= C2 (1 + |zeta|^p)``;
    * ``C3``: ``E[sup_{s<=delta} |X_s - zeta|^p] <= C3 (1 + |zeta|^p) delta^{p/2}``.

    Returns a dict with the fitted constants and per-start tables.
    """
    if p not in (2, 4):
        raise ConfigurationError(f"moment order must be 2 or 4, got {p}")
    if lattice.policy is None and lattice.controls.size > 1:
        raise ConfigurationError("moment_check needs a lattice built with a policy")
    zetas = [float(z) for z in zetas]
    C2 = 0.0
    C3 = 0.0
    table = []
    for zeta in zetas:
        lat = lattice.rebuilt(x0=zeta)
        for m in range(1, lat.N + 1):
            sub = lat.rebuilt(x0=zeta, N=m, T=lat.t0 + m * lat.dt)
            vals = cond_g_expectation(sub, sub.node_function(lambda x: np.abs(x) ** p))[0].values[0]
            r2 = float(vals) / (1.0 + abs(zeta) ** p)
            node_vals = [np.abs(lv - zeta) for lv in sub.levels]
            sup_val = augmented_g_expectation(sub, None, lambda a: np.maximum(a, 0.0) ** p, mode="max",
                                              node_values=node_vals, grid_size=129)
            delta = m * lat.dt
            r3 = sup_val / ((1.0 + abs(zeta) ** p) * delta ** (p / 2.0))
            C2 = max(C2, r2)
            C3 = max(C3, r3)
            table.append({"zeta": zeta, "delta": delta, "moment": float(vals), "sup_moment": sup_val})
    C1 = 0.0
    methods = set()
    S, K = lattice.vol_grid.size, lattice.shock_nodes.size
    for za, zb in itertools.combinations(zetas, 2):
        lat = lattice.rebuilt(x0=za)
        if (S * K) ** lattice.N <= tree_limit:
            vals = _pair_tree_moment(lat, za, zb, 2)
            methods.add("tree")
        else:
            vals = _pair_mc_moment(lat, za, zb, 2, mc_paths, seed)
            methods.add("monte_carlo")
        C1 = max(C1, max(v / (za - zb) ** 2 for v in vals))
    return {"p": p, "C1": C1, "C2": C2, "C3": C3, "table": table,
            "pair_method": "+".join(sorted(methods))}


def sample_paths(dynamics, controls, bounds, T, N, x0, n_paths, *, policy=0, scenario="random",
                 shocks="gaussian", vol_grid_size=2, seed=0, t0=0.0):
    """Monte Carlo paths of the state under one volatility scenario.

    ``scenario`` is ``"random"`` (i.i.d. grid volatility per step),
    ``"high"``, ``"low"`` or an explicit length-N sequence of grid indices.
    ``shocks`` is ``"gaussian"`` or a lattice shock scheme name.
    Returns an array of shape (n_paths, N + 1).
    """
    if isinstance(controls, (list, tuple, np.ndarray)):
        controls = ControlGrid(np.asarray(controls, dtype=np.float64))
    if isinstance(policy, (int, np.integer)):
        policy = constant_policy(policy)
    rng = np.random.default_rng(seed)
    vol_grid = build_lattice(T, N, bounds, vol_grid_size, t0=t0, max_nodes=1).vol_grid
    dt = (T - t0) / N
    if isinstance(scenario, str):
        if scenario == "random":
            scen = rng.integers(0, vol_grid.size, size=(n_paths, N))
        elif scenario == "high":
            scen = np.full((n_paths, N), vol_grid.size - 1)
        elif scenario == "low":
            scen = np.zeros((n_paths, N), dtype=np.int64)
        else:
            raise ConfigurationError(f"unknown scenario {scenario!r}")
    else:
        seq = np.asarray(scenario, dtype=np.int64)
        if seq.shape != (N,):
            raise ConfigurationError("explicit scenario must have one index per step")
        scen = np.broadcast_to(seq, (n_paths, N))
    if shocks == "gaussian":
        eps = rng.standard_normal((n_paths, N))
    else:
        nodes, weights = shock_rule(shocks)
        eps = rng.choice(nodes, size=(n_paths, N), p=weights)
    out = np.empty((n_paths, N + 1))
    out[:, 0] = x0
    for n in range(N):
        t = t0 + n * dt
        idx = np.asarray(policy(n, out[:, n]), dtype=np.int64)
        out[:, n + 1] = step_state(out[:, n], t, controls.points[idx], vol_grid[scen[:, n]],
                                   eps[:, n], dynamics, dt)
    return out
