"""Recursive control problems on the state lattice.

The value at a node is ``min_u max_s`` of the one-step G-BSDE candidate:
the inner max over volatility scenarios carries the sublinear expectation,
the outer min picks the control. On a Markovian lattice the infimum over
adapted step controls is attained by feedback controls, so a single
backward sweep computes it.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .bsde import MAX_ITERS, TOL_FP, BsdeProblem, check_step, solve_backward, solve_step
from .errors import ConfigurationError, ShapeError
from .forward_sde import ControlGrid, StateDynamics, build_state_lattice, constant_policy
from .generators.epstein_zin import EpsteinZinParams, epstein_zin, require_case
from .generators.validate import EvaluationBox, validate_assumptions
from .io import write_csv
from .sublinear import MERGE_TOL, NodeFunction, VolatilityBounds
from . import hjb as _hjb

__all__ = [
    "RecursiveControlProblem",
    "FeedbackPolicy",
    "ValueResult",
    "VALUE_CSV_SCHEMA",
    "value_direct",
    "backward_semigroup",
    "dpp_check",
    "format_dpp_report",
    "value_regularity_probe",
    "route_agreement",
    "EpsteinZinDemo",
    "epstein_zin_demo",
    "epstein_zin_ode_value",
]

VALUE_CSV_SCHEMA = "gbsde_lab.value/1"


@dataclass(frozen=True, eq=False)
class RecursiveControlProblem:
    """Controlled state, driver with control argument, terminal payoff, grids.

    ``terminal`` maps state arrays to values. ``domain`` fixes the state
    truncation shared by every sub-lattice; when omitted it is derived once
    from ``x0`` so that runs started at different times and points agree.
    """

    dynamics: StateDynamics
    spec: object
    terminal: object
    controls: ControlGrid
    bounds: VolatilityBounds
    T: float
    N: int
    x0: float = 0.0
    t0: float = 0.0
    vol_grid_size: int = 2
    shock_scheme: str = "trinomial"
    max_nodes: int = 4000
    domain: tuple = None
    domain_width: float = 6.0
    assumption_report: object = None

    def __post_init__(self):
        if int(self.N) < 1:
            raise ConfigurationError(f"need N >= 1, got {self.N}", key_path="discretization.N")
        if not self.T > self.t0:
            raise ConfigurationError(f"need T > t0, got T={self.T}, t0={self.t0}", key_path="problem.T")
        if self.domain is None:
            probe = build_state_lattice(self.dynamics, self.controls, self.bounds, self.T, 1, self.x0,
                                        t0=self.t0, vol_grid_size=self.vol_grid_size,
                                        shock_scheme=self.shock_scheme, domain_width=self.domain_width)
            object.__setattr__(self, "domain", probe.domain)
        else:
            lo, hi = (float(v) for v in self.domain)
            if not lo < hi:
                raise ConfigurationError(f"domain must be increasing, got {self.domain}", key_path="problem.domain")
            object.__setattr__(self, "domain", (lo, hi))

    @property
    def dt(self):
        return (self.T - self.t0) / int(self.N)

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(int(self.N) + 1)

    def with_(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)

    def lattice(self, t_index, x, steps=None, policy=None):
        """State lattice from ``(t_index, x)`` over ``steps`` steps (default: to ``T``)."""
        N = int(self.N)
        if not 0 <= t_index <= N:
            raise ConfigurationError(f"t_index must lie in [0, {N}], got {t_index}")
        steps = N - t_index if steps is None else int(steps)
        if steps < 1 or t_index + steps > N:
            raise ConfigurationError(f"need 1 <= steps <= {N - t_index}, got {steps}")
        if policy is not None and not isinstance(policy, (int, np.integer)):
            inner = policy

            def policy(level, xs, _inner=inner, _off=t_index):
                return _inner(level + _off, xs)
        return build_state_lattice(
            self.dynamics, self.controls, self.bounds, self.t0 + self.dt * (t_index + steps), steps, x,
            policy=policy, t0=self.t0 + self.dt * t_index, vol_grid_size=self.vol_grid_size,
            shock_scheme=self.shock_scheme, max_nodes=self.max_nodes, domain=self.domain,
        )

    def validate(self, box=None, samples=256, seed=0):
        """Attach and return the sampled assumption report for the driver."""
        if box is None:
            u = tuple((float(lo), float(hi)) for lo, hi in zip(self.controls.points.min(axis=0),
                                                                 self.controls.points.max(axis=0)))
            box = EvaluationBox(t=(self.t0, self.T), x=self.domain, u=u)
        report = validate_assumptions(self.spec, box, samples=samples, seed=seed)
        object.__setattr__(self, "assumption_report", report)
        return report


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Control index per (level, node); ``levels`` are absolute time indices.

    Called as ``policy(level, x)``, it returns the index stored at the
    nearest node of that level.
    """

    offset: int
    positions: tuple
    indices: tuple

    def __call__(self, level, x):
        k = level - self.offset
        if not 0 <= k < len(self.indices):
            raise ConfigurationError(f"policy undefined at level {level}")
        pos = self.positions[k]
        x = np.asarray(x, dtype=np.float64)
        j = np.clip(np.searchsorted(pos, x), 1, max(pos.size - 1, 1))
        if pos.size == 1:
            return np.zeros(x.shape, dtype=np.int64)
        left = pos[j - 1]
        right = pos[j]
        j = np.where(np.abs(x - left) <= np.abs(right - x), j - 1, j)
        return self.indices[k][j]


@dataclass(frozen=True, eq=False)
class ValueResult:
    """``value`` matches the shape of the requested ``x``; ``Y[k]`` lives on lattice level ``k``."""

    value: object
    policy: FeedbackPolicy
    lattice: object
    Y: list
    argmin: list
    t_index: int
    diagnostics: dict = field(default_factory=dict)

    def rows(self):
        lat = self.lattice
        for k, (pos, y) in enumerate(zip(lat.levels, self.Y)):
            arg = self.argmin[k] if k < len(self.argmin) else np.full(pos.size, -1)
            for xi, yi, ai in zip(pos.tolist(), y.tolist(), arg.tolist()):
                yield float(lat.times[k]), xi, yi, int(ai)

    def to_csv(self, path):
        write_csv(path, VALUE_CSV_SCHEMA, ["t", "x", "V", "argmin_u"], self.rows())


def _minmax_dp(lattice, terminal, spec, tol=TOL_FP, max_iters=MAX_ITERS):
    diag = check_step(spec, lattice)
    N = lattice.N
    Y = [None] * (N + 1)
    arg = [None] * N
    Y[N] = np.asarray(terminal, dtype=np.float64)
    iters = 0
    clamped = 0
    for n in range(N - 1, -1, -1):
        r = solve_step(lattice, n, Y[n + 1], spec, tol=tol, max_iters=max_iters)
        k = np.argmin(r.y, axis=1)
        Y[n] = r.y[np.arange(r.y.shape[0]), k]
        arg[n] = k
        iters = max(iters, r.iterations)
        clamped += r.clamped
    diag.update({"fixed_point_iters": iters, "clamped_targets": clamped,
                 "projected_states": lattice.diagnostics.get("projected", 0)})
    return Y, arg, diag


def _root_lookup(lattice, x):
    x = np.asarray(x, dtype=np.float64)
    pos = lattice.levels[0]
    j = np.clip(np.searchsorted(pos, x.reshape(-1)), 0, pos.size - 1)
    jm = np.clip(j - 1, 0, pos.size - 1)
    j = np.where(np.abs(pos[jm] - x.reshape(-1)) < np.abs(pos[j] - x.reshape(-1)), jm, j)
    if np.any(np.abs(pos[j] - x.reshape(-1)) > MERGE_TOL * lattice.scale * 10):
        raise ShapeError("start point not found among root nodes")
    return j.reshape(x.shape)


def value_direct(problem, t_index=0, x=None, *, tol=TOL_FP, max_iters=MAX_ITERS):
    """Value ``V(t, x)`` by the min-max backward sweep on the lattice from ``(t, x)``.

    ``x`` may be an array of start points (one merged lattice). Returns a
    ``ValueResult`` whose ``policy`` is the first-argmin feedback policy.
    """
    x = problem.x0 if x is None else x
    t_index = int(t_index)
    N = int(problem.N)
    if t_index == N:
        xv = np.asarray(x, dtype=np.float64)
        val = np.asarray(problem.terminal(xv), dtype=np.float64)
        val = float(val) if val.ndim == 0 else np.broadcast_to(val, xv.shape).copy()
        return ValueResult(val, FeedbackPolicy(N, (), ()), None, [np.atleast_1d(val)], [], t_index, {})
    lat = problem.lattice(t_index, x)
    term = np.broadcast_to(np.asarray(problem.terminal(lat.levels[-1]), dtype=np.float64),
                           lat.levels[-1].shape)
    Y, arg, diag = _minmax_dp(lat, term, problem.spec, tol, max_iters)
    idx = _root_lookup(lat, x)
    val = Y[0][idx]
    val = float(val) if np.ndim(val) == 0 else val
    policy = FeedbackPolicy(t_index, tuple(lat.levels[:-1]), tuple(arg))
    return ValueResult(val, policy, lat, Y, arg, t_index, diag)


def _policy_callable(policy):
    if isinstance(policy, (int, np.integer)):
        return constant_policy(int(policy))
    if callable(policy):
        return policy
    raise ConfigurationError(f"policy must be an int or a callable (level, x) -> index, got {type(policy)!r}")


def backward_semigroup(problem, t_index, s_index, x, policy, eta):
    """Solve the G-BSDE on ``[t, s]`` under ``policy`` with terminal ``eta``.

    ``eta`` is a callable on states or a ``NodeFunction`` on the last level
    of the policy lattice from ``(t, x)``. Returns the value at ``(t, x)``.
    """
    t_index, s_index = int(t_index), int(s_index)
    if not 0 <= t_index <= s_index <= int(problem.N):
        raise ConfigurationError(f"need 0 <= t_index <= s_index <= N, got {t_index}, {s_index}")
    x = float(x)
    if s_index == t_index:
        if isinstance(eta, NodeFunction):
            if eta.values.size != 1:
                raise ShapeError("on an empty interval eta must have exactly one node")
            return float(eta.values[0])
        return float(np.asarray(eta(np.array([x])), dtype=np.float64).reshape(-1)[0])
    lat = problem.lattice(t_index, x, steps=s_index - t_index, policy=_policy_callable(policy))
    if isinstance(eta, NodeFunction):
        if eta.values.shape != (lat.node_count(lat.N),):
            raise ShapeError(f"eta has {eta.values.size} values, the policy lattice has "
                             f"{lat.node_count(lat.N)} nodes at level {s_index}")
        term = NodeFunction(lat.N, eta.values)
    else:
        term = lat.node_function(eta)
    sol = solve_backward(BsdeProblem(lat, term, problem.spec))
    return sol.Y0


def dpp_check(problem, t_index, s_index, x=None, tol=None):
    """Compare ``V(t, x)`` with ``min_u G_{t,s}[V(s, X_s)]``.

    The left side is the direct value over ``[t, T]``. The right side runs
    the min-max sweep on ``[t, s]`` with terminal values ``V(s, .)``
    computed by an independent direct run started from the reachable
    level-``s`` nodes. ``tol`` defaults to ``1e-6 (1 + max|V(s, .)|)``.
    """
    x = problem.x0 if x is None else float(x)
    t_index, s_index = int(t_index), int(s_index)
    N = int(problem.N)
    if not 0 <= t_index <= s_index <= N:
        raise ConfigurationError(f"need 0 <= t_index <= s_index <= N, got {t_index}, {s_index}")
    lhs = value_direct(problem, t_index, x)
    if s_index == t_index:
        rhs, scale, nodes = lhs.value, abs(lhs.value), 1
    else:
        lat = problem.lattice(t_index, x, steps=s_index - t_index)
        nodes_s = lat.levels[-1]
        if s_index == N:
            v_s = np.broadcast_to(np.asarray(problem.terminal(nodes_s), dtype=np.float64), nodes_s.shape)
        else:
            v_s = np.asarray(value_direct(problem, s_index, nodes_s).value, dtype=np.float64).reshape(-1)
        Y, _, _ = _minmax_dp(lat, v_s, problem.spec)
        rhs = float(Y[0][_root_lookup(lat, x)])
        scale, nodes = float(np.max(np.abs(v_s))), nodes_s.size
    tol = 1e-6 * (1.0 + scale) if tol is None else float(tol)
    residual = abs(lhs.value - rhs)
    return {
        "t_index": t_index, "s_index": s_index, "x": x,
        "lhs": lhs.value, "rhs": rhs, "residual": residual, "tol": tol,
        "passed": residual <= tol, "level_s_nodes": nodes,
        "grid_regime": lhs.lattice.n_exact < lhs.lattice.N,
    }


def format_dpp_report(reports):
    """Plain-text residual table for one or more ``dpp_check`` reports."""
    if isinstance(reports, dict):
        reports = [reports]
    lines = [f"{'N':>5} {'t':>4} {'s':>4} {'x':>10} {'V(t,x)':>18} {'min G[V(s,.)]':>18} {'residual':>10} pass"]
    for r in reports:
        lines.append(f"{r.get('N', ''):>5} {r['t_index']:>4} {r['s_index']:>4} {r['x']:>10.4g} "
                     f"{r['lhs']:>18.12g} {r['rhs']:>18.12g} {r['residual']:>10.3g} "
                     f"{'yes' if r['passed'] else 'NO'}")
    return "\n".join(lines)


def _fit_constants(times, xs, V):
    """Smallest constants for the Lipschitz, growth and half-Holder bounds on a probe grid."""
    dx = np.diff(xs)
    lip = float(np.max(np.abs(np.diff(V, axis=1)) / dx)) if xs.size > 1 else 0.0
    growth = float(np.max(np.abs(V) / (1.0 + np.abs(xs))))
    hold = 0.0
    for a in range(len(times)):
        for b in range(a + 1, len(times)):
            q = np.abs(V[a] - V[b]) / ((1.0 + np.abs(xs)) * math.sqrt(abs(times[b] - times[a])))
            hold = max(hold, float(q.max()))
    return {"lipschitz": lip, "growth": growth, "holder": hold}


def value_regularity_probe(problem, fractions=(0.0, 0.25, 0.5, 0.75), xs=None, rel_tol=0.25):
    """Fit regularity constants of ``V`` on a probe grid, then again with ``N`` doubled.

    ``fractions`` locate the probe times in ``[t0, T)``; ``xs`` defaults to
    nine points spread over ``x0 +- sigma_high sqrt(T - t0)``. Passes when
    every constant changes by at most ``rel_tol`` relative to the coarse fit.
    """
    if xs is None:
        w = problem.bounds.sigma_high * math.sqrt(problem.T - problem.t0)
        xs = problem.x0 + np.linspace(-w, w, 9)
    xs = np.sort(np.asarray(xs, dtype=np.float64))
    fits = []
    for p in (problem, problem.with_(N=2 * int(problem.N))):
        idx = [int(round(fr * int(p.N))) for fr in fractions]
        V = np.array([np.asarray(value_direct(p, k, xs).value).reshape(-1) for k in idx])
        fits.append(_fit_constants(p.times[idx], xs, V))
    coarse, fine = fits
    change = {k: abs(fine[k] - coarse[k]) / max(abs(coarse[k]), 1e-12) for k in coarse}
    return {"coarse": coarse, "fine": fine, "relative_change": change,
            "stable": {k: v <= rel_tol for k, v in change.items()},
            "passed": all(v <= rel_tol for v in change.values())}


def route_agreement(problem, x_min, x_max, M, N_hjb, cfl="auto"):
    """Direct value at ``(t0, x0)`` against the finite-difference HJB value there."""
    direct = value_direct(problem, 0, problem.x0)
    hp = _hjb.HjbProblem(problem.dynamics, problem.spec, problem.terminal, problem.controls,
                         problem.bounds, x_min, x_max, M, N_hjb, problem.T, t0=problem.t0, cfl=cfl)
    sol = _hjb.solve(hp)
    v_hjb = sol.value_at(0, problem.x0)
    return {"V_direct": direct.value, "V_hjb": v_hjb, "gap": abs(direct.value - v_hjb),
            "hjb_substeps": sol.diagnostics["substeps"], "direct": direct, "hjb": sol}


# Epstein-Zin consumption/investment demo


@dataclass(frozen=True)
class EpsteinZinDemo:
    """Wealth dynamics ``dW = [r W + (b - r) pi W - c] dt + vol pi W dB`` with ``U_T = -W_T``."""

    params: EpsteinZinParams
    r: float = 0.0
    b_rate: float = 0.05
    vol: float = 0.2
    pi_interval: tuple = (-1.0, 1.0)
    points: int = 3
    w0: float = 1.0
    T: float = 1.0
    N: int = 8
    sigma_low: float = 0.5
    sigma_high: float = 1.0
    w_domain: tuple = (0.2, 3.0)
    M: int = 41
    N_hjb: int = 40


def _ez_problem(demo):
    require_case(demo.params)
    p = demo.params
    controls = ControlGrid.from_intervals([tuple(demo.pi_interval), (p.c_low, p.c_high)], demo.points)
    return RecursiveControlProblem(
        dynamics=StateDynamics.wealth(demo.r, demo.b_rate, demo.vol, pi_index=0, c_index=1),
        spec=epstein_zin(p, consumption_index=1),
        terminal=lambda w: -np.asarray(w, dtype=np.float64),
        controls=controls,
        bounds=VolatilityBounds(demo.sigma_low, demo.sigma_high),
        T=demo.T, N=demo.N, x0=demo.w0, domain=tuple(demo.w_domain),
    )


def _domain_violations(values, gamma):
    return int(np.count_nonzero((1.0 - gamma) * np.asarray(values) <= 0.0))


def epstein_zin_demo(demo):
    """Solve the demo by both routes.

    Returns ``V(0, w0)`` from each route, their gap, the count of grid
    values violating ``(1 - gamma) V > 0`` and the optimal ``(pi, c)`` at the
    root and along the central lattice path.
    """
    problem = _ez_problem(demo)
    direct = value_direct(problem, 0, demo.w0)
    hp = _hjb.HjbProblem(problem.dynamics, problem.spec, problem.terminal, problem.controls,
                         problem.bounds, demo.w_domain[0], demo.w_domain[1], demo.M, demo.N_hjb, demo.T)
    sol = _hjb.solve(hp)
    v_hjb = sol.value_at(0, demo.w0)
    gamma = demo.params.gamma
    violations = sum(_domain_violations(y, gamma) for y in direct.Y) + _domain_violations(sol.V, gamma)
    table = []
    lat = direct.lattice
    for k in range(lat.N):
        pos = lat.levels[k]
        i = int(np.argmin(np.abs(pos - demo.w0)))
        u = problem.controls.points[direct.argmin[k][i]]
        table.append({"t": float(lat.times[k]), "w": float(pos[i]), "pi": float(u[0]), "c": float(u[1]),
                      "V": float(direct.Y[k][i])})
    return {"V_direct": direct.value, "V_hjb": v_hjb, "gap": abs(direct.value - v_hjb),
            "domain_violations": violations, "policy": table, "case": require_case(demo.params),
            "hjb_substeps": sol.diagnostics["substeps"], "direct": direct, "hjb": sol}


def epstein_zin_ode_value(params, w, T, consumption=0.0):
    """Value along constant wealth ``w`` with constant consumption, no risky position, ``r = 0``.

    Integrates ``dV/dt = -f(c, V)`` backward from ``V(T) = -w``.
    """
    from scipy.integrate import solve_ivp

    from .generators.epstein_zin import aggregator

    sol = solve_ivp(lambda s, v: [-float(aggregator(consumption, v[0], params))], (T, 0.0), [-float(w)],
                    rtol=1e-12, atol=1e-14)
    return float(sol.y[0, -1])
