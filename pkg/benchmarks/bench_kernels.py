"""Time the numba and numpy kernel backends on representative inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel runs once per backend before timing (numba compiles then) and
the outputs of the two backends are compared. End-to-end timings for a
G-heat HJB solve and a BSDE solve follow.
"""
import argparse
import time

import numpy as np

from gbsde_lab import _kernels
from gbsde_lab.bsde import BsdeProblem, solve_backward
from gbsde_lab.forward_sde import ControlGrid, StateDynamics
from gbsde_lab.generators import linear, zero
from gbsde_lab.hjb import HjbProblem, solve
from gbsde_lab.sublinear import VolatilityBounds, build_lattice


def _inputs(rng, scale):
    m = 4000 * scale
    xp = np.sort(rng.normal(size=m))
    x = rng.normal(size=(m, 2, 2, 3)) * 1.2
    phi = rng.normal(size=(m, 201))
    q = np.linspace(-2, 2, 201)
    y = rng.normal(size=m)
    v = rng.normal(size=2001 * scale)
    diff = rng.uniform(0.1, 1.0, size=(v.size - 2, 9))
    drift = rng.normal(size=(v.size - 2, 9))
    m0, a = 300 * scale, 129
    w_next = rng.normal(size=(m0 + 50, a))
    j = rng.integers(0, m0 + 48, size=(m0, 2, 3))
    wx = rng.uniform(size=(m0, 2, 3))
    a_grid = np.linspace(-1, 1, a)
    a_new = rng.uniform(-1.2, 1.2, size=(m0, 2, a))
    weights = np.array([1 / 6, 2 / 3, 1 / 6])
    return {
        "interp_weights": lambda: _kernels.interp_weights(xp, x, 1e-12),
        "minplus_l1": lambda: _kernels.minplus_l1(phi, q, y, 4.0),
        "hjb_terms": lambda: _kernels.hjb_terms(v, 0.01, diff, drift),
        "augmented_step": lambda: _kernels.augmented_step(w_next, j, wx, a_new, a_grid, weights),
    }


def _end_to_end():
    bounds = VolatilityBounds(0.5, 1.0)
    hp = HjbProblem(StateDynamics.constant(), zero(), lambda x: np.sin(2 * x), ControlGrid.singleton(0.0),
                    bounds, -4.0, 4.0, 201, 256, 1.0)
    lat = build_lattice(1.0, 128, bounds, 3)
    bp = BsdeProblem(lat, lat.node_function(lambda x: np.abs(x)), linear(-1.0, 0.2))
    return {"hjb solve (M=201, N=256)": lambda: solve(hp), "bsde solve (N=128)": lambda: solve_backward(bp)}


def _first_array(out):
    return out[0] if isinstance(out, tuple) else out


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs, skip end-to-end runs")
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    rng = np.random.default_rng(0)
    cases = _inputs(rng, 1 if args.quick else 4)
    if not args.quick:
        cases.update(_end_to_end())
    previous = _kernels.backend()
    print(f"{'case':<28} " + " ".join(f"{b + ' [ms]':>13}" for b in backends) + f" {'speedup':>8} {'max |diff|':>11}")
    try:
        for name, fn in cases.items():
            times, outs = [], []
            for b in backends:
                _kernels.set_backend(b)
                outs.append(_first_array(fn()))
                times.append(_time(fn, args.repeat))
            diff = ""
            if len(outs) == 2 and isinstance(outs[0], np.ndarray):
                diff = f"{float(np.max(np.abs(outs[0] - outs[1]))):.2e}"
            elif len(outs) == 2 and hasattr(outs[0], "V"):
                diff = f"{float(np.max(np.abs(outs[0].V - outs[1].V))):.2e}"
            elif len(outs) == 2 and hasattr(outs[0], "Y0"):
                diff = f"{abs(outs[0].Y0 - outs[1].Y0):.2e}"
            speed = f"{times[0] / times[1]:.2f}x" if len(times) == 2 else ""
            print(f"{name:<28} " + " ".join(f"{1e3 * t:>13.3f}" for t in times) + f" {speed:>8} {diff:>11}")
    finally:
        _kernels.set_backend(previous)


if __name__ == "__main__":
    main()
