import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbsde_lab.errors import ConfigurationError, GeneratorEvaluationError
from gbsde_lab.forward_sde import ControlGrid, StateDynamics
from gbsde_lab.generators import linear, neg_sqrt, parse_generator, zero
from gbsde_lab.hjb import (
    HjbProblem,
    cfl_limit,
    hamiltonian,
    regularized_hamiltonian_sweep,
    solve,
    step_backward,
    viscosity_residual_probe,
)
from gbsde_lab.io import read_csv
from gbsde_lab.sublinear import VolatilityBounds
from oracles import classical_explicit_hjb_step

B = VolatilityBounds(0.5, 1.0)
ONE = ControlGrid.singleton(0.0)


def _heat(terminal, spec=None, M=81, N=200, bounds=B, **kw):
    return HjbProblem(StateDynamics.constant(), spec or zero(), terminal, ONE, bounds, -4.0, 4.0, M, N, 1.0, **kw)


def test_hamiltonian_is_g_of_hessian():
    p = _heat(np.cos)
    assert hamiltonian(0.0, 0.0, 0.0, 0.3, 2.0, p) == (1.0, 0)
    assert hamiltonian(0.0, 0.0, 0.0, 0.3, -2.0, p) == (-0.25, 0)
    v, k = hamiltonian(0.0, np.zeros(3), np.array([0.0, 1.0, 2.0]), 0.0, 0.0, _heat(np.cos, linear(-1.0)))
    assert v.tolist() == [0.0, -1.0, -2.0] and k.tolist() == [0, 0, 0]


def test_hamiltonian_takes_min_over_controls():
    p = HjbProblem(StateDynamics.control_volatility(), zero(), np.cos, ControlGrid(np.array([[0.5], [1.0]])),
                   B, -1.0, 1.0, 11, 10, 1.0)
    assert hamiltonian(0.0, 0.0, 0.0, 0.0, 2.0, p) == (0.25, 0)
    assert hamiltonian(0.0, 0.0, 0.0, 0.0, -2.0, p) == (-0.25, 1)
    with pytest.raises(ConfigurationError):
        hamiltonian(0.0, 0.0, np.nan, 0.0, 0.0, p)


def test_problem_validation():
    with pytest.raises(ConfigurationError) as exc:
        _heat(np.cos, M=4)
    assert exc.value.key_path == "grid.M"
    with pytest.raises(ConfigurationError):
        HjbProblem(StateDynamics.constant(), zero(), np.cos, ONE, B, 1.0, 1.0, 11, 10, 1.0)
    with pytest.raises(ConfigurationError):
        _heat(np.cos, cfl="loose")
    with pytest.raises(ConfigurationError) as exc, np.errstate(divide="ignore"):
        _heat(lambda x: 1 / x, M=81)
    assert exc.value.key_path == "problem.terminal"


def test_constants_are_preserved():
    sol = solve(_heat(lambda x: np.full_like(x, 2.5), N=20))
    assert np.all(sol.V == 2.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), i=st.integers(0, 40), delta=st.floats(1e-6, 1.0))
def test_step_is_monotone(seed, i, delta):
    spec = parse_generator("-0.5*y + 0.2*sin(y)", lipschitz_y=0.7)
    p = HjbProblem(StateDynamics.constant(b=0.4), spec, np.cos, ONE, B, -2.0, 2.0, 41, 10, 0.5)
    limit, _ = cfl_limit(p)
    V = np.random.default_rng(seed).normal(size=41)
    W = V.copy()
    W[i] += delta
    a = step_backward(V, 0.0, p, dt=limit)
    b = step_backward(W, 0.0, p, dt=limit)
    assert np.all(b[1:-1] >= a[1:-1] - 1e-12)


def test_degenerate_bounds_reduce_to_classical_scheme():
    bounds = VolatilityBounds(0.7, 0.7)
    spec = linear(-0.8)
    p = HjbProblem(StateDynamics.constant(b=-0.3, sigma=1.2), spec, np.sin, ONE, bounds, -3.0, 3.0, 61, 40, 1.0)
    limit, _ = cfl_limit(p)
    dt = 0.9 * limit
    V = np.sin(p.x)
    for _ in range(5):
        ours = step_backward(V, 0.0, p, dt=dt)
        ref = classical_explicit_hjb_step(V, p.dx, dt, 0.7 * 1.2, -0.3, lambda v: -0.8 * v)
        assert np.max(np.abs(ours - ref)) < 1e-12
        V = ours


def test_cfl_modes():
    p = _heat(np.cos, M=201, N=10)
    limit, info = cfl_limit(p)
    assert limit == pytest.approx(p.dx ** 2)
    with pytest.raises(ConfigurationError) as exc:
        solve(p.with_(cfl="strict"))
    assert exc.value.key_path == "grid.N"
    with pytest.raises(ConfigurationError):
        step_backward(p.terminal_values(), 0.0, p)
    sol = solve(p)
    assert sol.diagnostics["substeps"] == math.ceil(p.dt / limit)
    assert sol.diagnostics["dt_effective"] <= limit


def test_g_heat_extremes():
    up = solve(_heat(lambda x: x ** 2))
    down = solve(_heat(lambda x: -x ** 2))
    assert abs(up.value_at(0, 0.0) - 1.0) < 1e-3
    assert abs(down.value_at(0, 0.0) + 0.25) < 1e-3
    assert np.all(up.control_argmin[-1] == -1) and np.all(up.control_argmin[:-1] == 0)


def test_linear_driver_decay():
    sol = solve(_heat(lambda x: np.ones_like(x), linear(-1.0), N=100))
    assert abs(sol.value_at(0, 0.0) - math.exp(-1)) < 5e-3
    assert sol.diagnostics["max_residual"] < 1e-2


def test_driver_failures_report_location():
    p = _heat(lambda x: x, parse_generator("sqrt(y)"), M=21, N=10)
    with pytest.raises(GeneratorEvaluationError) as exc:
        solve(p)
    assert "t" in exc.value.point and "x" in exc.value.point


def test_viscosity_probe_on_kinks():
    terminal_level = [(100, i) for i in range(1, 80)]
    convex = viscosity_residual_probe(solve(_heat(np.abs, M=81, N=100)), points=terminal_level)
    kinks = [r for r in convex["points"] if r["kind"] == "convex_kink"]
    assert [r["x"] for r in kinks] == [0.0]
    assert kinks[0]["sub_status"] == "vacuous" and kinks[0]["super_status"] == "checked"
    assert convex["subsolution_ok"]
    concave = viscosity_residual_probe(solve(_heat(lambda x: -np.abs(x), M=81, N=100)), points=terminal_level)
    kinks = [r for r in concave["points"] if r["kind"] == "concave_kink"]
    assert len(kinks) == 1 and kinks[0]["super_status"] == "not_applicable"
    assert concave["supersolution_ok"]
    for phi in (np.cos, np.abs):
        rep = viscosity_residual_probe(solve(_heat(phi, M=81, N=100)))
        assert rep["subsolution_ok"] and rep["supersolution_ok"]
    skipped = viscosity_residual_probe(solve(_heat(np.cos, M=21, N=10)), points=[(0, 0), (0, 5)])
    assert len(skipped["skipped"]) == 1 and len(skipped["points"]) == 1


def test_hamiltonian_sweep_small():
    p = _heat(np.sin, neg_sqrt(), M=21, N=10)
    rep = regularized_hamiltonian_sweep(p, n_ladder=(1, 4, 16), samples=64)
    assert rep["n_gaps_strictly_decreasing"]
    assert rep["l_gaps"][1.0] == 0.0 and rep["first_exact_l"] == 1.0
    assert rep["l_gaps"][0.25] > 0
    with pytest.raises(ConfigurationError):
        regularized_hamiltonian_sweep(p, box={"w": (0, 1)})


def test_csv_and_gnuplot(tmp_path):
    sol = solve(_heat(np.cos, M=11, N=4))
    sol.to_csv(tmp_path / "hjb.csv")
    schema, cols, rows = read_csv(tmp_path / "hjb.csv")
    assert schema == "gbsde_lab.hjb/1" and cols == ["t", "x", "V", "argmin_control"]
    assert len(rows) == 5 * 11 and rows[-1][3] == -1.0
    assert rows[0][2] == sol.V[0, 0]
    sol.to_gnuplot(tmp_path / "hjb.dat")
    blocks = (tmp_path / "hjb.dat").read_text().strip().split("\n\n")
    assert len(blocks) == 5
