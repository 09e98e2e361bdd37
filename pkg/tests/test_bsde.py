import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbsde_lab.bsde import (
    BsdeProblem,
    apriori_estimate_check,
    check_step,
    comparison_check,
    difference_estimate_check,
    export_solution_csv,
    solve_backward,
    solve_regularized_sequence,
    transform_route_check,
)
from gbsde_lab.errors import ConfigurationError, SchemeError, ShapeError
from gbsde_lab.generators import linear, neg_sqrt, parse_generator, zero
from gbsde_lab.io import read_csv
from gbsde_lab.sublinear import NodeFunction, VolatilityBounds, build_lattice, cond_g_expectation
from oracles import tree_control_value

B = VolatilityBounds(0.5, 1.0)
LAT = build_lattice(1.0, 8, B, 3, max_nodes=100_000)


def _problem(spec, payoff, lat=LAT):
    return BsdeProblem(lat, lat.node_function(payoff), spec)


def test_zero_driver_is_conditional_g_expectation():
    sol = solve_backward(_problem(zero(), lambda x: np.sin(3 * x) + x ** 2))
    ref = cond_g_expectation(LAT, LAT.node_function(lambda x: np.sin(3 * x) + x ** 2))
    for a, b in zip(sol.Y, ref):
        assert np.allclose(a.values, b.values, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-2, 1), b=st.floats(-0.8, 0.8), c=st.floats(-1, 1), k=st.floats(-2, 2))
def test_decreasing_martingale_structure(a, b, c, k):
    spec = linear(a, b, c)
    sol = solve_backward(_problem(spec, lambda x: np.abs(x - 0.1) + k * np.sin(x)))
    scale = 1 + max(float(np.max(np.abs(y.values))) for y in sol.Y)
    assert sol.max_increment() <= 1e-10 * scale
    assert sol.martingale_residual() <= 1e-10 * scale
    for K in sol.K:
        assert np.all(K.values <= 1e-10 * scale)


def test_classical_case_has_no_k_and_matches_tree():
    bounds = VolatilityBounds(0.8, 0.8)
    lat = build_lattice(1.0, 4, bounds, 1, max_nodes=10_000)
    spec = parse_generator("-0.5*y + 0.3*sin(z)", lipschitz_z=0.3, lipschitz_y=0.5)
    sol = solve_backward(_problem(spec, lambda x: np.cos(x), lat))
    assert max(float(np.max(np.abs(d))) for d in sol.dK) <= 1e-12
    want = tree_control_value(0.0, 0.0, 1.0, 4, [0.8], "trinomial", np.cos,
                              lambda t, x, y, z, u: -0.5 * y + 0.3 * math.sin(z),
                              lambda t, x, y, z, u: 0.0, [[0.0]])
    assert abs(sol.Y0 - want) < 1e-10


def test_linear_driver_exponential_decay():
    lat = build_lattice(1.0, 64, B, 2, max_nodes=200)
    sol = solve_backward(_problem(linear(-1.0), lambda x: np.ones_like(x), lat))
    assert abs(sol.Y0 - math.exp(-1.0)) < 5e-3


def test_step_conditions():
    with pytest.raises(ConfigurationError, match="C\\*sqrt"):
        check_step(linear(0.0, 3.0), LAT)
    with pytest.raises(ConfigurationError, match="mu"):
        check_step(linear(6.0), LAT)
    assert check_step(linear(-1.0, 0.5), LAT)["monotone_scheme"] in (True, False)


def test_terminal_must_live_on_last_level():
    with pytest.raises(ShapeError):
        BsdeProblem(LAT, NodeFunction(LAT.N - 1, LAT.levels[LAT.N - 1]), zero())
    with pytest.raises(ShapeError):
        BsdeProblem(LAT, NodeFunction(LAT.N, np.zeros(3)), zero())


def test_non_convergence_raises_scheme_error_with_location():
    # understated monotonicity: y - E - 16 y dt has negative slope, no bracket
    spec = parse_generator("16*y", mu=0.0, lipschitz_y=None)
    with pytest.raises(SchemeError) as exc:
        solve_backward(_problem(spec, lambda x: 1 + x ** 2), max_iters=3)
    assert exc.value.location["level"] == LAT.N - 1


def test_fixed_point_independent_of_initial_guess():
    spec = parse_generator("-2*sign(y)*sqrt(abs(y))", decreasing_y=True, growth=2.0)
    prob = _problem(spec, lambda x: np.sin(2 * x))
    a = solve_backward(prob)
    guess = [np.full(LAT.node_count(n), 5.0) for n in range(LAT.N)]
    b = solve_backward(prob, y_guess=guess)
    for ya, yb in zip(a.Y, b.Y):
        assert np.allclose(ya.values, yb.values, atol=1e-10)


def test_comparison_holds_for_ordered_pairs():
    p1 = _problem(linear(-0.5, 0.3, -0.2), lambda x: np.sin(x))
    p2 = _problem(linear(-0.5, 0.3, 0.1), lambda x: np.sin(x) + 0.1 * x ** 2)
    rep = comparison_check(p1, p2)
    assert rep["applicable"] and rep["passed"] and rep["min_margin"] >= -1e-12
    swapped = comparison_check(p2, p1)
    assert swapped["applicable"] is False and swapped["passed"] is None


def test_exponential_transform_route():
    spec = parse_generator("0.8*y - 0.5*y^3/(1+y^2) + 0.3*z", mu=0.8, lipschitz_z=0.3, lipschitz_y=1.4)
    rep = transform_route_check(_problem(spec, np.cos), 0.8)
    assert rep["max_dY"] < 1e-10 and rep["max_dY_inverse"] < 1e-10
    assert rep["max_dZ"] < 1e-9 and rep["max_dK"] < 1e-10
    assert rep["transformed_mu"] == pytest.approx(0.0)


def test_regularized_sequence_is_monotone_and_converges():
    lat = build_lattice(1.0, 16, B, 2, max_nodes=2000)
    sols, rep = solve_regularized_sequence(_problem(neg_sqrt(), lambda x: x, lat), [1, 2, 4, 8])
    assert rep["Y0_nondecreasing"]
    assert rep["gaps_strictly_decreasing"]
    with pytest.raises(ConfigurationError):
        solve_regularized_sequence(_problem(neg_sqrt(), lambda x: x, lat), [2, 1])


def test_estimates_are_finite_and_difference_estimate_vanishes_on_equal_data():
    sol = solve_backward(_problem(linear(-1.0, 0.4), np.abs))
    rep = apriori_estimate_check(sol)
    assert all(math.isfinite(rep[k]) and rep[k] >= 0 for k in ("C_Y", "C_ZK"))
    assert rep["C_Y"] <= 1.0 + 1e-9 or rep["C_Y"] < 10
    other = solve_backward(_problem(linear(-1.0, 0.4, 0.2), lambda x: np.abs(x) + 0.1))
    d = difference_estimate_check(sol, other)
    assert 0 < d["C"] < 50
    assert difference_estimate_check(sol, sol)["C"] == 0.0
    with pytest.raises(ConfigurationError):
        apriori_estimate_check(sol, alpha=3.0)


def test_csv_export(tmp_path):
    lat = build_lattice(1.0, 2, B, 2, max_nodes=1000)
    sol = solve_backward(_problem(zero(), np.abs, lat))
    path = tmp_path / "bsde.csv"
    export_solution_csv(sol, path)
    schema, cols, rows = read_csv(path)
    assert schema == "gbsde_lab.bsde/1"
    assert cols == ["level", "node", "t", "x", "Y", "Z", "K", "argmax_sigma"]
    assert len(rows) == sum(lat.node_count(n) for n in range(3))
    assert rows[-1][5] == "" and rows[0][7] in (0.5, 1.0)
