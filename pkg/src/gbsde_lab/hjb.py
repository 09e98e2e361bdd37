"""Explicit monotone finite-difference solver for the HJB equation.

The equation is ``dV/dt + H(t, x, V, V_x, V_xx) = 0`` with ``V(T) = Phi`` and

    H = min_u { G(sigma^2 A + 2 p h + 2 g(t, x, v, sigma p, u)) + p b + f(t, x, v, sigma p, u) }.

Since ``G(a) = max_s s^2 a / 2`` over the two extreme volatilities, each
step is ``V^n = V^{n+1} + dt * min_u max_s (stencil_s + f)`` with upwinded
first differences for the drift ``b + s^2 h`` and central differences for
the diffusion and the ``z`` argument of the drivers.
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy.stats import qmc

from . import _kernels
from .errors import ConfigurationError, DomainError, GeneratorEvaluationError, SchemeError
from .forward_sde import ControlGrid, StateDynamics
from .generators.regularize import RegularizationParams, regularize_spec, truncate_spec
from .io import atomic_write_text, write_csv
from .sublinear import VolatilityBounds, g_scalar

__all__ = [
    "HjbProblem",
    "HjbSolution",
    "HJB_CSV_SCHEMA",
    "hamiltonian",
    "cfl_limit",
    "step_backward",
    "solve",
    "regularized_hamiltonian_sweep",
    "viscosity_residual_probe",
]

HJB_CSV_SCHEMA = "gbsde_lab.hjb/1"
CFL_MODES = ("auto", "strict")


@dataclass(frozen=True, eq=False)
class HjbProblem:
    """One-dimensional HJB problem on ``[x_min, x_max] x [t0, T]``.

    ``terminal`` maps a state array to values. ``cfl="auto"`` splits each
    of the ``N`` time steps into enough substeps to satisfy the CFL bound;
    ``"strict"`` raises instead.
    """

    dynamics: StateDynamics
    spec: object
    terminal: object
    controls: ControlGrid
    bounds: VolatilityBounds
    x_min: float
    x_max: float
    M: int
    N: int
    T: float
    t0: float = 0.0
    cfl: str = "auto"

    def __post_init__(self):
        if int(self.M) < 5:
            raise ConfigurationError(f"need M >= 5 space nodes, got {self.M}", key_path="grid.M")
        if int(self.N) < 1:
            raise ConfigurationError(f"need N >= 1 time steps, got {self.N}", key_path="grid.N")
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max) and self.x_min < self.x_max):
            raise ConfigurationError(f"need x_min < x_max, got [{self.x_min}, {self.x_max}]",
                                     key_path="grid.x_min")
        if not self.T > self.t0:
            raise ConfigurationError(f"need T > t0, got T={self.T}, t0={self.t0}", key_path="grid.T")
        if self.cfl not in CFL_MODES:
            raise ConfigurationError(f"cfl must be one of {CFL_MODES}, got {self.cfl!r}", key_path="grid.cfl")
        phi = self.terminal_values()
        if not np.all(np.isfinite(phi)):
            raise ConfigurationError("terminal function is not finite on the grid", key_path="problem.terminal")

    @property
    def x(self):
        return np.linspace(self.x_min, self.x_max, int(self.M))

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (int(self.M) - 1)

    @property
    def dt(self):
        return (self.T - self.t0) / int(self.N)

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(int(self.N) + 1)

    def terminal_values(self):
        x = self.x
        return np.broadcast_to(np.asarray(self.terminal(x), dtype=np.float64), x.shape).copy()

    def terminal_lipschitz(self):
        """Largest difference quotient of the terminal function on the grid."""
        phi = self.terminal_values()
        return float(np.max(np.abs(np.diff(phi)))) / self.dx

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class HjbSolution:
    """``V`` and ``control_argmin`` have shape (N + 1, M); the last argmin row is -1."""

    problem: HjbProblem
    t: np.ndarray
    x: np.ndarray
    V: np.ndarray
    control_argmin: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def value_at(self, t_index, x):
        """Linear interpolation of ``V(t_index, .)`` at ``x``."""
        j, w, _ = _kernels.interp_weights(self.x, np.atleast_1d(np.asarray(x, dtype=np.float64)))
        out = _kernels.gather(self.V[t_index], j, w)
        return out if np.ndim(x) else float(out[0])

    def rows(self):
        for n, tn in enumerate(self.t):
            for i, xi in enumerate(self.x):
                yield float(tn), float(xi), float(self.V[n, i]), int(self.control_argmin[n, i])

    def to_csv(self, path):
        write_csv(path, HJB_CSV_SCHEMA, ["t", "x", "V", "argmin_control"], self.rows())

    def to_gnuplot(self, path):
        """Whitespace table ``t x V`` with a blank line between time blocks."""
        lines = ["# t x V"]
        for n, tn in enumerate(self.t):
            lines.extend(f"{tn!r} {xi!r} {v!r}" for xi, v in zip(self.x.tolist(), self.V[n].tolist()))
            lines.append("")
        atomic_write_text(path, "\n".join(lines) + "\n")


def _volatilities(bounds):
    if bounds.degenerate:
        return (bounds.sigma_high,)
    return (bounds.sigma_low, bounds.sigma_high)


def _eval_driver(fn, t, x, v, z, u, which):
    try:
        out = np.asarray(fn(t, x, v, z, u), dtype=np.float64)
    except DomainError as exc:
        raise DomainError(f"{which} at {_location(t, x, u, None)}: {exc}") from exc
    except (GeneratorEvaluationError, FloatingPointError, ZeroDivisionError) as exc:
        raise GeneratorEvaluationError(f"{which} evaluation failed: {exc}",
                                       point=_location(t, x, u, None)) from exc
    if not np.all(np.isfinite(out)):
        bad = tuple(np.argwhere(~np.isfinite(out))[0])
        raise GeneratorEvaluationError(f"{which} returned a non-finite value", point=_location(t, x, u, bad))
    return out


def _location(t, x, u, index):
    """(t, x, u) at a multi-index of a (..., U) driver output, else the first entry."""
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if index is None:
        return {"t": float(np.asarray(t).reshape(-1)[0]), "x": float(x.reshape(-1)[0]), "u": u[0].tolist()}
    xi = np.broadcast_to(x, np.broadcast_shapes(x.shape, (1,) * len(index)))
    xi = xi[tuple(min(i, d - 1) for i, d in zip(index, xi.shape))]
    return {"t": float(np.asarray(t).reshape(-1)[0]), "x": float(xi), "u": u[min(index[-1], len(u) - 1)].tolist()}


def hamiltonian(t, x, v, p, A, problem):
    """Evaluate ``H`` and the first minimizing control index.

    ``x``, ``v``, ``p``, ``A`` broadcast together; the result has their
    broadcast shape.
    """
    x, v, p, A = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, v, p, A)))
    for name, a in (("x", x), ("v", v), ("p", p), ("A", A)):
        if not np.all(np.isfinite(a)):
            raise ConfigurationError(f"hamiltonian input {name} is not finite")
    cand = _hamiltonian_candidates(problem, t, x, v, p, A)
    k = np.argmin(cand, axis=-1)
    val = np.take_along_axis(cand, k[..., None], axis=-1)[..., 0]
    if val.ndim == 0:
        return float(val), int(k)
    return val, k


def _hamiltonian_candidates(problem, t, x, v, p, A):
    u = problem.controls.points
    xx, vv, pp, AA = x[..., None], v[..., None], p[..., None], A[..., None]
    b, h, s = problem.dynamics.coefficients(t, xx, u)
    z = s * pp
    spec = problem.spec
    g = _eval_driver(spec.g, t, xx, vv, z, u, "g")
    f = _eval_driver(spec.f, t, xx, vv, z, u, "f")
    F = s * s * AA + 2.0 * pp * h + 2.0 * g
    return g_scalar(F, problem.bounds) + pp * b + f


def _v_lipschitz(spec):
    if spec.lipschitz_y is not None:
        return float(spec.lipschitz_y)
    return max(float(spec.mu), 0.0)


def _coefficients(problem, t):
    x = problem.x[:, None]
    return problem.dynamics.coefficients(t, x, problem.controls.points)


def cfl_limit(problem, times=None):
    """Largest stable step ``dx^2 / (sh^2 max sigma^2 + dx max|b + s^2 h| + dx^2 L (1 + sh^2))``.

    ``L`` is the declared y-Lipschitz constant of the drivers (or the
    monotonicity constant when none is declared). Coefficients are sampled
    on the space grid at ``times`` (default: the time levels).
    """
    times = problem.times if times is None else times
    dx = problem.dx
    sh = problem.bounds.sigma_high
    smax = 0.0
    dmax = 0.0
    for t in times:
        b, h, s = _coefficients(problem, float(t))
        smax = max(smax, float(np.max(s * s)))
        for sv in _volatilities(problem.bounds):
            dmax = max(dmax, float(np.max(np.abs(b + sv * sv * h))))
    L = _v_lipschitz(problem.spec)
    denom = sh * sh * smax + dx * dmax + dx * dx * L * (1.0 + sh * sh)
    limit = math.inf if denom == 0.0 else dx * dx / denom
    return limit, {"max_sigma2": smax, "max_drift": dmax, "L_v": L}


def _operator(problem, V, t, coef):
    """Interior values of ``max_s (stencil_s + s^2 g) + f`` per control, shape (M - 2, U)."""
    b, h, s = coef
    dx = problem.dx
    xi = problem.x[1:-1, None]
    bi, hi, si = b[1:-1], h[1:-1], s[1:-1]
    vi = V[1:-1, None]
    pc = ((V[2:] - V[:-2]) / (2.0 * dx))[:, None]
    z = si * pc
    u = problem.controls.points
    spec = problem.spec
    f = np.broadcast_to(_eval_driver(spec.f, t, xi, vi, z, u, "f"), bi.shape)
    g = np.broadcast_to(_eval_driver(spec.g, t, xi, vi, z, u, "g"), bi.shape)
    best = None
    for sv in _volatilities(problem.bounds):
        s2 = sv * sv
        term = _kernels.hjb_terms(V, dx, 0.5 * s2 * si * si, bi + s2 * hi) + s2 * g
        best = term if best is None else np.maximum(best, term)
    return best + f


def _extrapolate(V):
    V[0] = 2.0 * V[1] - V[2]
    V[-1] = 2.0 * V[-2] - V[-3]
    return V


def _apply(problem, V_next, t, dt, coef):
    op = _operator(problem, V_next, t, coef)
    k = np.argmin(op, axis=1)
    hmin = np.take_along_axis(op, k[:, None], axis=1)[:, 0]
    V = np.empty_like(V_next)
    V[1:-1] = V_next[1:-1] + dt * hmin
    _extrapolate(V)
    arg = np.empty(V.shape, dtype=np.int64)
    arg[1:-1] = k
    arg[0], arg[-1] = k[0], k[-1]
    return V, arg, hmin


def _substeps(problem, dt, limit, info):
    if dt <= limit * (1.0 + 1e-12):
        return 1
    if problem.cfl == "strict":
        raise ConfigurationError(
            f"CFL bound violated: dt={dt:.6g} > dx^2/(sigma_high^2*max sigma^2 + dx*max|b+s^2 h| + dx^2*L*(1+sigma_high^2))"
            f" = {limit:.6g} (max sigma^2={info['max_sigma2']:.4g}, max drift={info['max_drift']:.4g},"
            f" L={info['L_v']:.4g})",
            key_path="grid.N",
        )
    return int(math.ceil(dt / limit * (1.0 + 1e-12)))


def step_backward(V_next, t, problem, dt=None, return_argmin=False):
    """One explicit step from time ``t + dt`` to ``t``.

    ``dt`` defaults to the problem step. The CFL bound is checked first and
    raises ``ConfigurationError`` when violated, whatever the ``cfl`` mode.
    """
    V_next = np.asarray(V_next, dtype=np.float64)
    if V_next.shape != (int(problem.M),):
        raise ConfigurationError(f"V_next must have shape ({problem.M},), got {V_next.shape}")
    dt = problem.dt if dt is None else float(dt)
    limit, info = cfl_limit(problem, times=[t + dt])
    if dt > limit * (1.0 + 1e-12):
        raise ConfigurationError(f"CFL bound violated: dt={dt:.6g} > {limit:.6g}", key_path="grid.N")
    V, arg, _ = _apply(problem, V_next, t, dt, _coefficients(problem, t + dt))
    return (V, arg) if return_argmin else V


def solve(problem, min_substeps=1):
    """Backward sweep from ``T`` to ``t0``.

    ``min_substeps`` forces at least that many substeps per time step, so
    runs with different drivers can share one effective step.

    Diagnostics: substeps per step, the CFL limit, the largest interior
    consistency residual ``|(V^n - V^{n+1})/dt - H_h(V^n)|`` per step
    (an O(dt) time-lag estimate), and whether the z-argument of the drivers
    keeps the scheme monotone.
    """
    limit, info = cfl_limit(problem)
    dt = problem.dt
    sub = max(_substeps(problem, dt, limit, info), int(min_substeps))
    h = dt / sub
    times = problem.times
    N, M = int(problem.N), int(problem.M)
    V = np.empty((N + 1, M))
    arg = np.full((N + 1, M), -1, dtype=np.int64)
    V[N] = problem.terminal_values()
    residual = np.zeros(N)
    cur = V[N].copy()
    for n in range(N - 1, -1, -1):
        for j in range(sub, 0, -1):
            t_hi = times[n] + j * h
            cur, a, _ = _apply(problem, cur, t_hi - h, h, _coefficients(problem, t_hi))
            if not np.all(np.isfinite(cur)):
                bad = int(np.argmax(~np.isfinite(cur)))
                raise SchemeError("non-finite value in HJB sweep",
                                  location={"t": float(t_hi - h), "x": float(problem.x[bad])})
        V[n] = cur
        arg[n] = a
        op = _operator(problem, V[n], times[n], _coefficients(problem, times[n])).min(axis=1)
        residual[n] = float(np.max(np.abs((V[n, 1:-1] - V[n + 1, 1:-1]) / dt - op)))
    dx = problem.dx
    C = problem.spec.lipschitz_z
    _, _, s = _coefficients(problem, times[0])
    smin = float(np.min(np.abs(s))) if s.size else 0.0
    lo = problem.bounds.sigma_low
    diag = {
        "substeps": sub,
        "cfl_limit": limit,
        "dt_effective": h,
        "residual": residual,
        "max_residual": float(residual.max()),
        "z_monotone": C == 0.0 or 0.5 * lo * lo * smin * smin / dx >= 0.5 * C * float(np.max(np.abs(s))),
        **info,
    }
    return HjbSolution(problem=problem, t=times.copy(), x=problem.x, V=V, control_argmin=arg, diagnostics=diag)


@dataclass
class _SweepBox:
    t: tuple
    x: tuple
    v: tuple
    p: tuple
    A: tuple


def _sample_box(box, samples, seed):
    raw = qmc.Sobol(5, scramble=True, seed=seed).random_base2(max(1, math.ceil(math.log2(max(samples, 2)))))
    raw = raw[:samples]
    cols = []
    for i, iv in enumerate((box.t, box.x, box.v, box.p, box.A)):
        cols.append(iv[0] + (iv[1] - iv[0]) * raw[:, i])
    t, x, v, p, A = cols
    # the v = 0 slice is where non-Lipschitz drivers differ most from their regularizations
    v0 = min(max(0.0, box.v[0]), box.v[1])
    extra = np.full(8, v0)
    return (np.concatenate([t, t[:8]]), np.concatenate([x, x[:8]]), np.concatenate([v, extra]),
            np.concatenate([p, p[:8]]), np.concatenate([A, A[:8]]))


def _h_on_samples(problem, pts):
    t, x, v, p, A = pts
    out = np.empty(t.shape)
    for tv in np.unique(t):
        m = t == tv
        out[m] = _hamiltonian_candidates(problem, float(tv), x[m], v[m], p[m], A[m]).min(axis=-1)
    return out


def regularized_hamiltonian_sweep(problem, n_ladder=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512),
                                  level=1.0, l_ladder=(0.25, 0.5, 1.0, 2.0, 4.0), *, box=None,
                                  samples=256, seed=0, solve_grid=None, params=None):
    """Compare ``H``, the truncations ``H^l`` and the regularizations ``H_n^l``.

    ``box`` is a dict of ``(lo, hi)`` for ``t, x, v, p, A``; by default the
    problem's time and space ranges with ``|v|, |p|, |A| <= 0.9, 1, 1``.
    With ``solve_grid=(M, N)`` the PDE is also solved on that grid with each
    ``H_n^l`` and with ``H^l``, and the sup-norm gaps of the values reported.
    """
    b = dict(t=(problem.t0, problem.T), x=(problem.x_min, problem.x_max), v=(-0.9, 0.9),
             p=(-1.0, 1.0), A=(-1.0, 1.0))
    if box:
        unknown = set(box) - set(b)
        if unknown:
            raise ConfigurationError(f"unknown sweep box keys {sorted(unknown)}")
        b.update(box)
    pts = _sample_box(_SweepBox(**b), samples, seed)
    params = params or RegularizationParams()
    H = _h_on_samples(problem, pts)
    l_gaps = {}
    for lv in l_ladder:
        Hl = _h_on_samples(problem.with_(spec=truncate_spec(problem.spec, lv)), pts)
        l_gaps[float(lv)] = float(np.max(np.abs(Hl - H)))
    spec_l = truncate_spec(problem.spec, level)
    p_l = problem.with_(spec=spec_l)
    Hl = _h_on_samples(p_l, pts)
    n_gaps = []
    for n in n_ladder:
        Hn = _h_on_samples(problem.with_(spec=regularize_spec(spec_l, n, params)), pts)
        n_gaps.append(float(np.max(np.abs(Hn - Hl))))
    bound = float(np.max(np.abs(pts[2])))
    report = {
        "n_ladder": [float(n) for n in n_ladder],
        "n_gaps": n_gaps,
        "n_gaps_strictly_decreasing": all(a > c for a, c in zip(n_gaps, n_gaps[1:])),
        "n_gaps_nonincreasing": all(a >= c for a, c in zip(n_gaps, n_gaps[1:])),
        "final_n_gap": n_gaps[-1] if n_gaps else None,
        "level": float(level),
        "l_gaps": l_gaps,
        "v_bound": bound,
        "first_exact_l": next((lv for lv, gap in sorted(l_gaps.items()) if gap == 0.0), None),
        "samples": int(pts[0].size),
    }
    if solve_grid is not None:
        M, N = solve_grid
        base = p_l.with_(M=int(M), N=int(N), cfl="auto")
        # one effective step for every run, fixed by the stiffest regularization
        finest = base.with_(spec=regularize_spec(spec_l, max(n_ladder), params))
        limit, info = cfl_limit(finest)
        sub = _substeps(finest, finest.dt, limit, info)
        Vl = solve(base, min_substeps=sub).V
        v_gaps = []
        for n in n_ladder:
            Vn = solve(base.with_(spec=regularize_spec(spec_l, n, params)), min_substeps=sub).V
            v_gaps.append(float(np.max(np.abs(Vn - Vl))))
        report["v_gaps"] = v_gaps
        report["v_gaps_nonincreasing"] = all(a >= c - 1e-12 for a, c in zip(v_gaps, v_gaps[1:]))
    return report


def viscosity_residual_probe(solution, points=None, tol=None, kink_tol=None):
    """Check the sub/supersolution inequalities with finite-difference jets.

    ``points`` lists ``(t_index, x_index)`` pairs; by default every interior
    node at the time levels ``0, N/4, N/2, 3N/4``. The time derivative is the backward
    difference toward ``T`` (forward difference at ``t_index = N``).
    A slope jump larger than ``kink_tol`` is a kink: at a convex kink the
    superjet is empty and the subsolution test holds vacuously, at a concave
    kink the subjet is empty and the supersolution test is not applicable.
    Elsewhere the jet is ``(a, central p, A)``. ``tol`` is a heuristic band,
    by default ``10 (dx + dt)(1 + max|V|)``.
    """
    prob = solution.problem
    V, dx, dt = solution.V, prob.dx, prob.dt
    N, M = V.shape[0] - 1, V.shape[1]
    tol = 10.0 * (dx + dt) * (1.0 + float(np.max(np.abs(V)))) if tol is None else float(tol)
    if kink_tol is None:
        kink_tol = 0.5 * max(1.0, prob.terminal_lipschitz())
    if points is None:
        # stay off the last steps, where a kinked terminal is still being smoothed
        levels = sorted({0, N // 4, N // 2, (3 * N) // 4})
        points = [(n, i) for n in levels for i in range(1, M - 1)]
    records, skipped = [], []
    for n, i in points:
        n, i = int(n), int(i)
        if i <= 0 or i >= M - 1 or n < 0 or n > N:
            skipped.append({"t_index": n, "x_index": i, "note": "boundary or out of range"})
            continue
        a = (V[n + 1, i] - V[n, i]) / dt if n < N else (V[n, i] - V[n - 1, i]) / dt
        pl = (V[n, i] - V[n, i - 1]) / dx
        pr = (V[n, i + 1] - V[n, i]) / dx
        A = (pr - pl) / dx
        t, x, v = float(solution.t[n]), float(solution.x[i]), float(V[n, i])
        rec = {"t_index": n, "x_index": i, "t": t, "x": x}
        jump = pr - pl
        if jump > kink_tol:
            rec["kind"] = "convex_kink"
            rec["sub_status"] = "vacuous"
            rec["sub_violation"] = 0.0
            ps = np.linspace(pl, pr, 5)
            r = a + _hamiltonian_candidates(prob, t, np.full(5, x), np.full(5, v), ps, np.full(5, A)).min(axis=-1)
            rec["super_status"] = "checked"
            rec["super_violation"] = float(max(0.0, r.max()))
        elif jump < -kink_tol:
            rec["kind"] = "concave_kink"
            ps = np.linspace(pr, pl, 5)
            r = a + _hamiltonian_candidates(prob, t, np.full(5, x), np.full(5, v), ps, np.full(5, A)).min(axis=-1)
            rec["sub_status"] = "checked"
            rec["sub_violation"] = float(max(0.0, -r.min()))
            rec["super_status"] = "not_applicable"
            rec["super_violation"] = 0.0
        else:
            rec["kind"] = "smooth"
            r = a + float(_hamiltonian_candidates(prob, t, np.array([x]), np.array([v]),
                                                  np.array([0.5 * (pl + pr)]), np.array([A])).min())
            rec["residual"] = r
            rec["sub_status"] = rec["super_status"] = "checked"
            rec["sub_violation"] = float(max(0.0, -r))
            rec["super_violation"] = float(max(0.0, r))
        records.append(rec)
    worst_sub = max((r["sub_violation"] for r in records), default=0.0)
    worst_super = max((r["super_violation"] for r in records), default=0.0)
    return {
        "tol": tol,
        "kink_tol": kink_tol,
        "points": records,
        "skipped": skipped,
        "worst_sub_violation": worst_sub,
        "worst_super_violation": worst_super,
        "subsolution_ok": worst_sub <= tol,
        "supersolution_ok": worst_super <= tol,
    }
