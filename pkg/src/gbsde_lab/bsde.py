"""Backward solver for G-BSDEs on a scenario or state lattice.

One step from level ``n+1`` to ``n`` solves, at every node,

    y = max_s [ E_s[Y'] + f(t, x, y, z_s, u) dt + g(t, x, y, z_s, u) s^2 dt ],
    z_s = E_s[Y' eps] / (s sqrt(dt)),

where ``E_s`` averages over the shock quadrature with volatility ``s``.
The decreasing G-martingale enters through per-scenario increments
``dK_s = c_s(y) - y <= 0`` whose maximum over ``s`` is zero.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import _kernels
from .errors import ConfigurationError, SchemeError, ShapeError
from .generators.regularize import (
    RegularizationParams,
    exp_transform,
    regularize_spec,
    transform_solution,
    truncate_spec,
)
from .generators.validate import EvaluationBox, validate_assumptions
from .io import write_csv
from .sublinear import (
    MERGE_TOL,
    NodeFunction,
    augmented_g_expectation,
    cond_g_expectation,
    one_step_moments,
)

__all__ = [
    "BsdeProblem",
    "BsdeSolution",
    "StepResult",
    "check_step",
    "solve_step",
    "solve_backward",
    "solve_regularized_sequence",
    "transform_route_check",
    "comparison_check",
    "apriori_estimate_check",
    "difference_estimate_check",
    "export_solution_csv",
    "BSDE_CSV_SCHEMA",
    "BSDE_CSV_COLUMNS",
]

TOL_FP = 1e-12
MAX_ITERS = 200
TOL_CMP = 1e-9
BSDE_CSV_SCHEMA = "gbsde_lab.bsde/1"
BSDE_CSV_COLUMNS = ("level", "node", "t", "x", "Y", "Z", "K", "argmax_sigma")


@dataclass(frozen=True, eq=False)
class BsdeProblem:
    """Lattice, terminal values at level N and a driver pair."""

    lattice: object
    terminal: NodeFunction
    spec: object

    def __post_init__(self):
        if not isinstance(self.terminal, NodeFunction):
            raise ShapeError("terminal must be a NodeFunction")
        self.terminal.check(self.lattice, self.lattice.N)
        if not np.all(np.isfinite(self.terminal.values)):
            raise ConfigurationError("terminal values must be finite")
        U = self.lattice.state_coefficients(0).shape[1]
        if U != 1:
            raise ConfigurationError("a BSDE problem needs a lattice with one control per node")

    def with_spec(self, spec):
        return BsdeProblem(self.lattice, self.terminal, spec)

    def with_terminal(self, values):
        return BsdeProblem(self.lattice, NodeFunction(self.lattice.N, values), self.spec)


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Solution on the lattice.

    ``Y[n]`` lives on level ``n``; ``Z[n]`` and ``argmax[n]`` on levels
    ``0..N-1`` (reported at the maximizing scenario); ``Z_scen[n]`` and
    ``dK[n]`` have shape (nodes, S): the per-scenario coefficient and the
    K increment over the step ``n -> n+1``. K itself is path dependent;
    ``K[n]`` summarizes it per node as the lowest value reached.
    """

    problem: BsdeProblem
    Y: list
    Z: list
    Z_scen: list
    dK: list
    argmax: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def lattice(self):
        return self.problem.lattice

    @property
    def K(self):
        """Lowest value of K over lattice paths reaching each node (0 at level 0)."""
        lat = self.lattice
        out = [np.zeros(lat.node_count(0))]
        tol = MERGE_TOL * lat.scale
        for n in range(lat.N):
            tg = lat.targets(n)[:, 0]
            j, w, _ = _kernels.interp_weights(lat.levels[n + 1], tg, tol)
            val = (out[n][:, None] + self.dK[n])[:, :, None] + np.zeros(tg.shape)
            nxt = np.full(lat.node_count(n + 1), np.inf)
            np.minimum.at(nxt, j[w < 1.0], val[w < 1.0])
            hi = np.minimum(j + 1, lat.node_count(n + 1) - 1)
            np.minimum.at(nxt, hi[w > 0.0], val[w > 0.0])
            # nodes no path reaches keep the nearest reached value
            nxt[~np.isfinite(nxt)] = 0.0
            out.append(nxt)
        return [NodeFunction(n, v) for n, v in enumerate(out)]

    @property
    def Y0(self):
        return float(self.Y[0].values[0])

    def martingale_residual(self):
        """Largest ``|max_s dK[n][i, s]|`` over all nodes."""
        return max((float(np.max(np.abs(d.max(axis=1)))) for d in self.dK), default=0.0)

    def max_increment(self):
        """Largest ``dK`` entry (should be <= tolerance)."""
        return max((float(d.max()) for d in self.dK), default=0.0)

    def k_path(self, scenario, positions=None):
        """K along one scenario path of grid-volatility indices.

        ``positions`` are the node positions visited (level 0..N-1); by
        default the path starts at the first root node and follows the
        central shock. Values between nodes are interpolated.
        """
        lat = self.lattice
        scenario = np.asarray(scenario, dtype=np.int64)
        if positions is None:
            positions = [lat.levels[0][0]]
            mid = int(np.argmin(np.abs(lat.shock_nodes)))
            for n in range(lat.N - 1):
                x = np.array([positions[-1]])
                positions.append(float(lat.targets(n, x)[0, 0, scenario[n], mid]))
        k = [0.0]
        for n in range(lat.N):
            inc = np.interp(positions[n], lat.levels[n], self.dK[n][:, scenario[n]])
            k.append(k[-1] + float(inc))
        return np.array(k)


@dataclass
class StepResult:
    y: np.ndarray          # (nodes, U)
    z: np.ndarray          # (nodes, U, S)
    cand: np.ndarray       # (nodes, U, S) candidates at the solution
    iterations: int
    clamped: int


def check_step(spec, lattice):
    """Raise ``ConfigurationError`` unless the step size is admissible.

    Requires ``C sqrt(dt) < 1`` and, for a declared monotonicity constant
    ``mu > 0``, ``mu dt (1 + sigma_high^2) < 1``. Returns diagnostics,
    including whether the scheme is monotone in the next-level values.
    """
    dt = lattice.dt
    hi = lattice.bounds.sigma_high
    C = spec.lipschitz_z
    if not C * math.sqrt(dt) < 1.0:
        raise ConfigurationError(
            f"step condition C*sqrt(dt) < 1 violated: C={C}, dt={dt:g}, C*sqrt(dt)={C * math.sqrt(dt):.4g}")
    mono = max(spec.mu, 0.0) * dt * (1.0 + hi * hi)
    if not mono < 1.0:
        raise ConfigurationError(
            f"step condition mu*dt*(1+sigma_high^2) < 1 violated: mu={spec.mu}, dt={dt:g}, value={mono:.4g}")
    lo = lattice.bounds.sigma_low
    eps = float(np.max(np.abs(lattice.shock_nodes)))
    return {
        "C_sqrt_dt": C * math.sqrt(dt),
        "monotone_scheme": C * math.sqrt(dt) * eps / lo <= 1.0,
        "mu_dt": mono,
    }


def _damping(spec, lattice):
    if spec.lipschitz_y is None:
        return 1.0
    a = spec.lipschitz_y * lattice.dt * (1.0 + lattice.bounds.sigma_high ** 2)
    return 1.0 if a < 1.0 else 1.0 / (1.0 + a)


def solve_step(lattice, level, y_next, spec, *, y_init=None, tol=TOL_FP, max_iters=MAX_ITERS,
               theta=None):
    """Solve the implicit one-step equation at every node and control slot."""
    E, Eeps, clamped = one_step_moments(lattice, level, y_next)
    vol = lattice.vol_grid
    dt = lattice.dt
    z = Eeps / (vol * math.sqrt(dt))
    t = lattice.times[level]
    x = lattice.levels[level][:, None, None]
    u = lattice.state_coefficients(level)[:, :, None, :]
    s2dt = vol * vol * dt
    theta = _damping(spec, lattice) if theta is None else theta

    def candidates(y):
        yy = y[:, :, None]
        return E + spec.f(t, x, yy, z, u) * dt + spec.g(t, x, yy, z, u) * s2dt

    y = E.max(axis=2) if y_init is None else np.array(y_init, dtype=np.float64)
    it = 0
    for it in range(1, max_iters + 1):
        c = candidates(y)
        y_new = c.max(axis=2)
        if theta != 1.0:
            y_new = (1.0 - theta) * y + theta * y_new
        err = np.abs(y_new - y)
        y = y_new
        if np.all(err <= tol * (1.0 + np.abs(y))):
            break
    else:
        # a non-Lipschitz driver can make the iteration cycle; the residual
        # y - max_s c_s(y) is still increasing, so bracket and bisect
        y, ok = _bisect(lambda v: v - candidates(v).max(axis=2), E.max(axis=2), tol, max_iters)
        if not np.all(ok):
            bad = np.unravel_index(int(np.argmin(ok)), ok.shape)
            raise SchemeError(
                f"one-step equation has no bracketed root after {max_iters} fixed-point iterations",
                location={"level": level, "node": int(bad[0]), "x": float(lattice.levels[level][bad[0]]),
                          "control": int(bad[1])},
            )
        it = max_iters
    c = candidates(y)
    return StepResult(y=y, z=z, cand=c, iterations=it, clamped=clamped)


def _bisect(resid, guess, tol, max_iters):
    """Vectorized bracketing and bisection for an increasing residual."""
    lo = guess - 1.0
    hi = guess + 1.0
    width = 2.0
    for _ in range(60):
        low_bad = resid(lo) > 0
        high_bad = resid(hi) < 0
        if not (np.any(low_bad) or np.any(high_bad)):
            break
        width *= 2.0
        lo = np.where(low_bad, lo - width, lo)
        hi = np.where(high_bad, hi + width, hi)
    ok = (resid(lo) <= 0) & (resid(hi) >= 0)
    for _ in range(4 * max_iters):
        mid = 0.5 * (lo + hi)
        r = resid(mid)
        lo = np.where(r <= 0, mid, lo)
        hi = np.where(r <= 0, hi, mid)
        if np.all(hi - lo <= tol * (1.0 + np.abs(mid))):
            break
    return 0.5 * (lo + hi), ok


def solve_backward(problem, *, tol=TOL_FP, max_iters=MAX_ITERS, y_guess=None):
    """Solve the G-BSDE backward from the terminal level.

    ``y_guess`` optionally gives per-level starting values for the fixed
    point (used to probe uniqueness).
    """
    lat, spec = problem.lattice, problem.spec
    diag = check_step(spec, lat)
    N = lat.N
    Y = [None] * (N + 1)
    Z, Zs, dK, arg = [None] * N, [None] * N, [None] * N, [None] * N
    Y[N] = problem.terminal.values.copy()
    iters = []
    clamped = 0
    for n in range(N - 1, -1, -1):
        init = None if y_guess is None else np.asarray(y_guess[n], dtype=np.float64).reshape(-1, 1)
        r = solve_step(lat, n, Y[n + 1], spec, y_init=init, tol=tol, max_iters=max_iters)
        y = r.y[:, 0]
        cand = r.cand[:, 0, :]
        d = cand - y[:, None]
        a = np.argmax(cand, axis=1)
        Y[n] = y
        Zs[n] = r.z[:, 0, :]
        Z[n] = np.take_along_axis(Zs[n], a[:, None], axis=1)[:, 0]
        dK[n] = d
        arg[n] = a
        iters.append(r.iterations)
        clamped += r.clamped
    diag.update({"fixed_point_iters": max(iters, default=0), "clamped_targets": clamped,
                 "martingale_residual": max((float(np.max(np.abs(d.max(axis=1)))) for d in dK), default=0.0)})
    return BsdeSolution(
        problem=problem,
        Y=[NodeFunction(n, v) for n, v in enumerate(Y)],
        Z=[NodeFunction(n, v) for n, v in enumerate(Z)],
        Z_scen=Zs, dK=dK, argmax=arg, diagnostics=diag,
    )


def tol_k(solution):
    return 1e-9 * (1.0 + max(float(np.max(np.abs(y.values))) for y in solution.Y))


def solve_regularized_sequence(problem, n_ladder, level=None, params=None, lam=None):
    """Solve the inf-convolution regularized problems along ``n_ladder``.

    With ``lam`` (default: no transform) the driver first goes through the
    lattice-consistent exponential transform; the returned solutions are
    mapped back to the original variables. ``level`` applies the
    truncation ``Pi_l`` on top of the regularization.

    Returns ``(solutions, report)`` where the report lists the sup-node
    gaps between consecutive entries and tags the last solution with its gap.
    """
    ladder = [float(n) for n in n_ladder]
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ConfigurationError("n_ladder must be strictly increasing")
    lat = problem.lattice
    base = problem.spec
    if lam:
        base = exp_transform(base, lam, dt=lat.dt)
        rho_T = math.exp(lam * lat.times[-1])
        work = BsdeProblem(lat, NodeFunction(lat.N, rho_T * problem.terminal.values), base)
    else:
        work = problem
    solutions = []
    for n in ladder:
        spec_n = regularize_spec(base, n, params)
        if level is not None:
            spec_n = truncate_spec(spec_n, level)
        sol = solve_backward(work.with_spec(spec_n))
        if lam:
            sol = _map_solution(sol, problem.with_spec(spec_n), -lam)
        solutions.append(sol)
    gaps = []
    for a, b in zip(solutions, solutions[1:]):
        gaps.append(max(float(np.max(np.abs(ya.values - yb.values))) for ya, yb in zip(a.Y, b.Y)))
    y0 = [s.Y0 for s in solutions]
    report = {
        "ladder": ladder,
        "Y0": y0,
        "gaps": gaps,
        "gaps_strictly_decreasing": all(b < a for a, b in zip(gaps, gaps[1:])),
        "Y0_nondecreasing": all(b >= a - 1e-12 for a, b in zip(y0, y0[1:])),
        "final_gap": gaps[-1] if gaps else None,
        "extrapolated_Y0": _aitken(y0),
    }
    return solutions, report


def _aitken(seq):
    if len(seq) < 3:
        return seq[-1] if seq else None
    a, b, c = seq[-3:]
    den = c - 2 * b + a
    if abs(den) < 1e-15:
        return c
    return c - (c - b) ** 2 / den


def _map_solution(sol, problem, lam):
    """Apply the exponential change of variables with rate ``lam`` to a solution."""
    times = sol.lattice.times
    Y, Zs, dK = transform_solution([y.values for y in sol.Y], sol.Z_scen, sol.dK, times, lam)
    Z = [np.take_along_axis(z, a[:, None], axis=1)[:, 0] for z, a in zip(Zs, sol.argmax)]
    return BsdeSolution(
        problem=problem,
        Y=[NodeFunction(n, v) for n, v in enumerate(Y)],
        Z=[NodeFunction(n, v) for n, v in enumerate(Z)],
        Z_scen=Zs, dK=dK, argmax=sol.argmax, diagnostics=dict(sol.diagnostics, transformed=lam),
    )


def transform_route_check(problem, lam):
    """Compare both orders of the exponential transform and the solve.

    Route A solves the original problem and transforms the solution; route
    B transforms the driver (lattice-consistent form) and the terminal, then
    solves. Returns the largest nodewise differences in Y, Z and dK.
    """
    lat = problem.lattice
    sol_a = solve_backward(problem)
    mapped = _map_solution(sol_a, problem, lam)
    spec_b = exp_transform(problem.spec, lam, dt=lat.dt)
    prob_b = BsdeProblem(lat, NodeFunction(lat.N, math.exp(lam * lat.times[-1]) * problem.terminal.values), spec_b)
    sol_b = solve_backward(prob_b)
    dy = max(float(np.max(np.abs(a.values - b.values))) for a, b in zip(mapped.Y, sol_b.Y))
    dz = max((float(np.max(np.abs(a - b))) for a, b in zip(mapped.Z_scen, sol_b.Z_scen)), default=0.0)
    dk = max((float(np.max(np.abs(a - b))) for a, b in zip(mapped.dK, sol_b.dK)), default=0.0)
    back = _map_solution(sol_b, problem, -lam)
    dy_back = max(float(np.max(np.abs(a.values - b.values))) for a, b in zip(back.Y, sol_a.Y))
    return {"max_dY": dy, "max_dZ": dz, "max_dK": dk, "max_dY_inverse": dy_back,
            "transformed_mu": spec_b.mu}


def _driver_box(p, margin=1.0):
    lat = p.lattice
    xs = np.concatenate(lat.levels)
    ymax = float(np.max(np.abs(p.terminal.values))) + margin
    return EvaluationBox(t=(float(lat.times[0]), float(lat.times[-1])),
                         x=(float(xs.min()), float(xs.max())),
                         y=(-2 * ymax, 2 * ymax), z=(-2 * ymax - 1, 2 * ymax + 1))


def comparison_check(p1, p2, samples=256, seed=0, tol=TOL_CMP):
    """Solve two ordered problems and report ``max (Y1 - Y2)^+`` over all nodes.

    The ordering of terminals is checked nodewise and the ordering of the
    drivers on a sampled box; when either fails the report is marked
    inapplicable rather than failed.
    """
    if p1.lattice is not p2.lattice and any(
            a.shape != b.shape or not np.allclose(a, b) for a, b in zip(p1.lattice.levels, p2.lattice.levels)):
        raise ConfigurationError("comparison needs both problems on the same lattice")
    term_ok = bool(np.all(p1.terminal.values <= p2.terminal.values + 1e-15))
    box = _driver_box(p1)
    order_gap = _driver_order_gap(p1.spec, p2.spec, box, samples, seed, p1.lattice)
    applicable = term_ok and order_gap <= 1e-12
    s1 = solve_backward(p1)
    s2 = solve_backward(p2)
    viol = max(float(np.max(np.maximum(a.values - b.values, 0.0))) for a, b in zip(s1.Y, s2.Y))
    margin = min(float(np.min(b.values - a.values)) for a, b in zip(s1.Y, s2.Y))
    return {
        "applicable": applicable,
        "terminal_ordered": term_ok,
        "driver_order_violation": order_gap,
        "max_violation": viol,
        "min_margin": margin,
        "passed": (viol <= tol) if applicable else None,
        "solutions": (s1, s2),
    }


def _driver_order_gap(spec1, spec2, box, samples, seed, lattice):
    from scipy.stats import qmc

    raw = qmc.Sobol(4, scramble=True, seed=seed).random_base2(max(1, math.ceil(math.log2(samples))))
    t = box.t[0] + (box.t[1] - box.t[0]) * raw[:, 0]
    x = box.x[0] + (box.x[1] - box.x[0]) * raw[:, 1]
    y = box.y[0] + (box.y[1] - box.y[0]) * raw[:, 2]
    z = box.z[0] + (box.z[1] - box.z[0]) * raw[:, 3]
    u = lattice.state_coefficients(0)[:1, 0][0]
    gap = 0.0
    for name in ("f", "g"):
        a = getattr(spec1, name)(t, x, y, z, u)
        b = getattr(spec2, name)(t, x, y, z, u)
        gap = max(gap, float(np.max(a - b)))
    return gap


def apriori_estimate_check(solution, alpha=2.0, grid_size=257):
    """Fit the constants of the Y bound and of the Z/K bound on this lattice.

    ``C_Y = max_nodes |Y|^alpha / (1 + E_n[|xi|^alpha + sum |f(t,x,0,0)|^alpha dt])``;
    ``C_ZK = (E[(int Z^2)^{alpha/2}] + E[|K_T|^alpha]) /
    (1 + E[sup |Y|^alpha] + E[(int |f(t,x,0,0)| dt)^alpha])``.
    """
    if not 1.0 < alpha <= 2.0:
        raise ConfigurationError(f"alpha must lie in (1, 2], got {alpha}")
    lat = solution.lattice
    spec = solution.problem.spec
    dt = lat.dt
    f0 = []
    for n in range(lat.N):
        x = lat.levels[n]
        u = lat.state_coefficients(n)[:, 0, :]
        f0.append(np.abs(spec.f(lat.times[n], x, np.zeros_like(x), np.zeros_like(x), u)))
    xi = solution.problem.terminal.values
    rhs = cond_g_expectation(lat, NodeFunction(lat.N, np.abs(xi) ** alpha),
                             running=[v ** alpha * dt for v in f0])
    c_y = 0.0
    for y, r in zip(solution.Y, rhs):
        c_y = max(c_y, float(np.max(np.abs(y.values) ** alpha / (1.0 + r.values))))
    zz = augmented_g_expectation(lat, [z ** 2 * dt for z in solution.Z_scen],
                                 lambda a: np.maximum(a, 0.0) ** (alpha / 2.0), grid_size=grid_size)
    kk = augmented_g_expectation(lat, solution.dK, lambda a: np.abs(a) ** alpha, grid_size=grid_size)
    sy = augmented_g_expectation(lat, None, lambda a: np.maximum(a, 0.0) ** alpha, mode="max",
                                 node_values=[np.abs(y.values) for y in solution.Y], grid_size=grid_size)
    ff = augmented_g_expectation(lat, [v * dt for v in f0],
                                 lambda a: np.maximum(a, 0.0) ** alpha, grid_size=grid_size)
    lhs = zz + kk
    c_zk = lhs / (1.0 + sy + ff)
    return {"alpha": alpha, "C_Y": c_y, "C_ZK": c_zk, "E_int_Z2": zz, "E_K_T": kk,
            "E_sup_Y": sy, "E_int_f0": ff}


def difference_estimate_check(s1, s2):
    """Fit ``C`` in ``|Y1 - Y2|^2 <= C E_n[|xi1 - xi2|^2 + sum F_hat^2 dt]``.

    ``F_hat = |f1 - f2| + |g1 - g2|`` evaluated along the first solution
    (its Y and per-scenario Z); both solutions must share the lattice.
    """
    lat = s1.lattice
    p1, p2 = s1.problem, s2.problem
    dt = lat.dt
    running = []
    for n in range(lat.N):
        x = lat.levels[n][:, None]
        u = lat.state_coefficients(n)[:, 0, None, :]
        y = s1.Y[n].values[:, None]
        z = s1.Z_scen[n]
        t = lat.times[n]
        fh = np.abs(p1.spec.f(t, x, y, z, u) - p2.spec.f(t, x, y, z, u)) \
            + np.abs(p1.spec.g(t, x, y, z, u) - p2.spec.g(t, x, y, z, u))
        running.append(np.broadcast_to(fh, z.shape) ** 2 * dt)
    term = (p1.terminal.values - p2.terminal.values) ** 2
    rhs = cond_g_expectation(lat, NodeFunction(lat.N, term), running=running)
    C = 0.0
    for a, b, r in zip(s1.Y, s2.Y, rhs):
        d2 = (a.values - b.values) ** 2
        pos = r.values > 1e-300
        if np.any(d2[~pos] > 1e-20):
            C = math.inf
        if np.any(pos):
            C = max(C, float(np.max(d2[pos] / r.values[pos])))
    return {"C": C}


def export_solution_csv(solution, path):
    """Write ``level,node,t,x,Y,Z,K,argmax_sigma`` rows (Z, argmax empty at level N)."""
    lat = solution.lattice
    K = solution.K
    rows = []
    for n in range(lat.N + 1):
        xs = lat.levels[n]
        for i, x in enumerate(xs):
            if n < lat.N:
                z = float(solution.Z[n].values[i])
                a = float(lat.vol_grid[solution.argmax[n][i]])
            else:
                z, a = "", ""
            rows.append((n, i, float(lat.times[n]), float(x), float(solution.Y[n].values[i]), z,
                         float(K[n].values[i]), a))
    write_csv(path, BSDE_CSV_SCHEMA, BSDE_CSV_COLUMNS, rows)
