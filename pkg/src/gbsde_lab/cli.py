"""Command-line front end.

Exit codes: 0 success, 2 configuration/parse/domain errors (including an
Epstein-Zin parameter pair outside both monotone cases), 3 numerical
failures.
"""
import argparse
import math
import os
import sys

import numpy as np

from . import _kernels
from . import config as cfgmod
from .errors import (
    ConfigurationError,
    DomainError,
    GeneratorEvaluationError,
    ParseError,
    SchemeError,
    ShapeError,
)

COMMANDS = ("solve-bsde", "solve-hjb", "value", "dpp-check", "epstein-zin", "validate-generator")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Run:
    """Resolved config plus the output plumbing shared by all commands."""

    def __init__(self, cfg, out_dir, dry_run, stdout, given=None):
        self.cfg = cfg
        self.given = given or {}
        self.out_dir = out_dir
        self.dry_run = dry_run
        self.stdout = stdout
        self.prefix = cfg["output"]["prefix"]

    def path(self, name):
        return os.path.join(self.out_dir, self.prefix + name)

    def say(self, text=""):
        print(text, file=self.stdout)

    def plan(self, command, outputs):
        self.say(f"dry run: {command}")
        self.say("resolved config:")
        self.say(cfgmod.dumps(self.cfg).rstrip())
        self.say("would write:")
        for o in outputs:
            self.say(f"  {self.path(o)}")


def _problem_parts(cfg):
    p = cfg["problem"]
    return (cfgmod.build_bounds(p["bounds"]), cfgmod.build_driver(p["driver"]),
            cfgmod.build_terminal(p["terminal"]))


def _control_problem(cfg, N=None):
    from .control import RecursiveControlProblem

    p, d = cfg["problem"], cfg["discretization"]
    bounds, spec, terminal = _problem_parts(cfg)
    return RecursiveControlProblem(
        dynamics=cfgmod.build_dynamics(p["dynamics"]), spec=spec, terminal=terminal,
        controls=cfgmod.build_controls(p["controls"]), bounds=bounds, T=p["T"], N=N or d["N"],
        x0=p["x0"], t0=p["t0"], vol_grid_size=d["vol_grid_size"], shock_scheme=d["shock_scheme"],
        max_nodes=d["max_nodes"], domain=tuple(p["domain"]) if "domain" in p else None,
    )


def _hjb_problem(cfg, M=None, N=None):
    from .hjb import HjbProblem

    p, d = cfg["problem"], cfg["discretization"]
    bounds, spec, terminal = _problem_parts(cfg)
    width = 6.0 * bounds.sigma_high * math.sqrt(p["T"] - p["t0"])
    return HjbProblem(
        dynamics=cfgmod.build_dynamics(p["dynamics"]), spec=spec, terminal=terminal,
        controls=cfgmod.build_controls(p["controls"]), bounds=bounds,
        x_min=d.get("x_min", p["x0"] - width), x_max=d.get("x_max", p["x0"] + width),
        M=M or d["M"], N=N or d.get("N_hjb", d["N"]), T=p["T"], t0=p["t0"], cfl=d["cfl"],
    )


def cmd_solve_bsde(run):
    from .bsde import BsdeProblem, export_solution_csv, solve_backward, solve_regularized_sequence
    from .forward_sde import build_state_lattice
    from .sublinear import build_lattice

    cfg = run.cfg
    p, d = cfg["problem"], cfg["discretization"]
    bounds, spec, terminal = _problem_parts(cfg)
    if run.dry_run:
        run.plan("solve-bsde", ["bsde.csv"])
        return EXIT_OK
    if "dynamics" in run.given.get("problem", {}):
        lat = build_state_lattice(cfgmod.build_dynamics(p["dynamics"]), cfgmod.build_controls(p["controls"]),
                                  bounds, p["T"], d["N"], p["x0"], policy=0, t0=p["t0"],
                                  vol_grid_size=d["vol_grid_size"], shock_scheme=d["shock_scheme"],
                                  max_nodes=d["max_nodes"])
    else:
        lat = build_lattice(p["T"], d["N"], bounds, d["vol_grid_size"], d["shock_scheme"], x0=p["x0"],
                            t0=p["t0"], max_nodes=d["max_nodes"])
    problem = BsdeProblem(lat, lat.node_function(terminal), spec)
    ladder = cfg["run"].get("ladder")
    if ladder:
        sols, report = solve_regularized_sequence(problem, ladder)
        sol = sols[-1]
    else:
        sol, report = solve_backward(problem), None
    K_T = sol.K[-1].values
    run.say(f"Y_0 = {sol.Y0!r}")
    run.say(f"K_T range = [{float(K_T.min())!r}, {float(K_T.max())!r}]")
    run.say(f"martingale residual = {sol.martingale_residual():.3e}")
    if report:
        run.say("regularization ladder:")
        run.say(f"  {'n':>8} {'Y_0':>20} {'gap to next':>14}")
        for i, n in enumerate(report["ladder"]):
            gap = f"{report['gaps'][i]:.6e}" if i < len(report["gaps"]) else ""
            run.say(f"  {n:>8g} {report['Y0'][i]:>20.12g} {gap:>14}")
        run.say(f"  gaps strictly decreasing: {str(report['gaps_strictly_decreasing']).lower()}")
    if cfg["output"]["csv"]:
        export_solution_csv(sol, run.path("bsde.csv"))
        run.say(f"wrote {run.path('bsde.csv')}")
    return EXIT_OK


def _order(gaps):
    out = []
    for a, b in zip(gaps, gaps[1:]):
        out.append(math.log2(a / b) if a > 0 and b > 0 else float("nan"))
    return out


def _central_sup(coarse, fine):
    """Sup difference at coarse nodes in the central half of the domain.

    Linear extrapolation at the edges leaves a boundary layer, so the
    comparison stays away from it.
    """
    lo, hi = coarse.x[0], coarse.x[-1]
    q = 0.25 * (hi - lo)
    m = (coarse.x >= lo + q) & (coarse.x <= hi - q)
    return float(np.max(np.abs(fine.value_at(0, coarse.x[m]) - coarse.V[0][m])))


def cmd_solve_hjb(run):
    from .hjb import solve

    cfg = run.cfg
    problem = _hjb_problem(cfg)
    refine = cfg["run"].get("refine")
    outputs = ["hjb.csv"] + (["hjb.dat"] if cfg["output"]["gnuplot"] else [])
    if run.dry_run:
        run.plan("solve-hjb", outputs)
        return EXIT_OK
    sol = solve(problem)
    x0 = cfg["problem"]["x0"]
    run.say(f"V(t0, x0) = {sol.value_at(0, x0)!r}")
    run.say(f"substeps per step = {sol.diagnostics['substeps']}, CFL limit = {sol.diagnostics['cfl_limit']:.6g}")
    run.say(f"max consistency residual = {sol.diagnostics['max_residual']:.3e}")
    if problem.bounds.degenerate:
        run.say("classical match: true (sigma_low == sigma_high, G is linear)")
    if refine:
        run.say("refinement table:")
        run.say(f"  {'M':>6} {'N':>6} {'V(t0,x0)':>20} {'sup diff':>12} {'order':>7}")
        vals, diffs, prev = [], [], None
        for level in refine:
            s = solve(problem.with_(M=level.get("M", problem.M), N=level.get("N_hjb", level.get("N", problem.N))))
            vals.append(s.value_at(0, x0))
            if prev is not None:
                diffs.append(_central_sup(prev, s))
            prev = s
        orders = _order(diffs)
        for i, level in enumerate(refine):
            diff = f"{diffs[i - 1]:.4e}" if i >= 1 else ""
            order = f"{orders[i - 2]:.3f}" if i >= 2 else ""
            run.say(f"  {level.get('M', problem.M):>6} {level.get('N_hjb', level.get('N', problem.N)):>6} "
                    f"{vals[i]:>20.12g} {diff:>12} {order:>7}")
    if cfg["output"]["csv"]:
        sol.to_csv(run.path("hjb.csv"))
        run.say(f"wrote {run.path('hjb.csv')}")
    if cfg["output"]["gnuplot"]:
        sol.to_gnuplot(run.path("hjb.dat"))
        run.say(f"wrote {run.path('hjb.dat')}")
    return EXIT_OK


def cmd_value(run):
    from .control import route_agreement, value_direct

    cfg = run.cfg
    problem = _control_problem(cfg)
    r = cfg["run"]
    if run.dry_run:
        run.plan("value", ["value.csv"])
        return EXIT_OK
    x = r.get("x", problem.x0)
    res = value_direct(problem, r["t_index"], x)
    run.say(f"V(t_{r['t_index']}, {x!r}) = {res.value!r}")
    if r["routes"]:
        refine = r.get("refine") or [{"N": problem.N, "M": cfg["discretization"]["M"],
                                      "N_hjb": cfg["discretization"].get("N_hjb", problem.N)}]
        hp = _hjb_problem(cfg)
        run.say("route agreement:")
        run.say(f"  {'N':>6} {'M':>6} {'N_hjb':>6} {'V_direct':>20} {'V_hjb':>20} {'gap':>12}")
        for level in refine:
            N = level.get("N", problem.N)
            M = level.get("M", hp.M)
            Nh = level.get("N_hjb", hp.N)
            ra = route_agreement(problem.with_(N=N), hp.x_min, hp.x_max, M, Nh, cfl=hp.cfl)
            run.say(f"  {N:>6} {M:>6} {Nh:>6} {ra['V_direct']:>20.12g} {ra['V_hjb']:>20.12g} {ra['gap']:>12.4e}")
    if cfg["output"]["csv"]:
        res.to_csv(run.path("value.csv"))
        run.say(f"wrote {run.path('value.csv')}")
    return EXIT_OK


def cmd_dpp_check(run):
    from .control import dpp_check, format_dpp_report

    cfg = run.cfg
    problem = _control_problem(cfg)
    r = cfg["run"]
    if run.dry_run:
        run.plan("dpp-check", [])
        return EXIT_OK
    t_index = r["t_index"]
    ns = [level["N"] for level in r.get("refine", [])] or [problem.N]
    reports = []
    for N in ns:
        s_index = r.get("s_index", (t_index + N) // 2)
        if "s_index" in r and N != problem.N:
            s_index = int(round(r["s_index"] * N / problem.N))
        rep = dpp_check(problem.with_(N=N), int(round(t_index * N / problem.N)), s_index, r.get("x", problem.x0),
                        tol=r.get("tolerance"))
        rep["N"] = N
        reports.append(rep)
    run.say(format_dpp_report(reports))
    if len(reports) > 1:
        res = [rep["residual"] for rep in reports]
        dec = all(b < a or a == b == 0.0 for a, b in zip(res, res[1:]))
        run.say(f"residual decreasing under refinement: {str(dec).lower()}")
    return EXIT_OK


def cmd_epstein_zin(run):
    from .control import EpsteinZinDemo, epstein_zin_demo
    from .generators.epstein_zin import EpsteinZinParams, require_case

    cfg = run.cfg
    ez = cfg.get("epstein_zin")
    if ez is None:
        raise ConfigurationError("missing section", key_path="epstein_zin")
    pkeys = ("delta", "gamma", "psi", "c_low", "c_high")
    params = EpsteinZinParams(**{k: ez[k] for k in pkeys if k in ez})
    require_case(params)
    demo_kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ez.items() if k not in pkeys}
    demo = EpsteinZinDemo(params=params, **demo_kw)
    if run.dry_run:
        run.plan("epstein-zin", ["epstein_zin_policy.csv"])
        return EXIT_OK
    out = epstein_zin_demo(demo)
    run.say(f"monotonicity case: ({out['case']})")
    run.say(f"V_direct(0, w0) = {out['V_direct']!r}")
    run.say(f"V_hjb(0, w0)    = {out['V_hjb']!r}")
    run.say(f"route gap       = {out['gap']:.4e}")
    run.say(f"domain violations = {out['domain_violations']}")
    run.say("optimal controls along the central path:")
    run.say(f"  {'t':>8} {'w':>10} {'pi':>8} {'c':>8} {'V':>18}")
    for row in out["policy"]:
        run.say(f"  {row['t']:>8.4f} {row['w']:>10.5g} {row['pi']:>8.4g} {row['c']:>8.4g} {row['V']:>18.12g}")
    if cfg["output"]["csv"]:
        from .io import write_csv

        write_csv(run.path("epstein_zin_policy.csv"), "gbsde_lab.ez_policy/1", ["t", "w", "pi", "c", "V"],
                  [(r["t"], r["w"], r["pi"], r["c"], r["V"]) for r in out["policy"]])
        run.say(f"wrote {run.path('epstein_zin_policy.csv')}")
    return EXIT_OK


def cmd_validate_generator(run):
    from .generators.validate import EvaluationBox, validate_assumptions

    cfg = run.cfg
    spec = cfgmod.build_driver(cfg["problem"]["driver"])
    r = cfg["run"]
    box_cfg = r.get("box", {})
    box = EvaluationBox(**{k: tuple(tuple(iv) for iv in v) if k == "u" else tuple(v) for k, v in box_cfg.items()})
    if run.dry_run:
        run.plan("validate-generator", [])
        return EXIT_OK
    report = validate_assumptions(spec, box, samples=r["samples"], seed=r["seed"])
    run.say(report.to_text())
    run.say(f"overall: {'pass' if report.passed else 'FAIL'}")
    return EXIT_OK


HANDLERS = {
    "solve-bsde": cmd_solve_bsde,
    "solve-hjb": cmd_solve_hjb,
    "value": cmd_value,
    "dpp-check": cmd_dpp_check,
    "epstein-zin": cmd_epstein_zin,
    "validate-generator": cmd_validate_generator,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gbsde-lab", description="G-BSDE and recursive control laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--threads", metavar="K", type=int, help="worker threads for compiled kernels")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
    common.add_argument("--seed", metavar="S", type=int, help="seed for sampled checks (overrides run.seed)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
    return parser


def main(argv=None, stdout=None):
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        raw = cfgmod.load(args.config) if args.config else {"version": cfgmod.CONFIG_VERSION}
        cfg = cfgmod.resolve(raw)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigurationError("seed must be >= 0", key_path="--seed")
            cfg["run"]["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("threads must be >= 1", key_path="--threads")
            _kernels.set_threads(args.threads)
        run = _Run(cfg, args.out or cfg["output"]["dir"], args.dry_run, stdout, given=raw)
        return HANDLERS[args.command](run)
    except (ConfigurationError, ParseError, DomainError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemeError, GeneratorEvaluationError, FloatingPointError, OverflowError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
