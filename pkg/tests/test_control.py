import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbsde_lab.control import (
    EpsteinZinDemo,
    FeedbackPolicy,
    RecursiveControlProblem,
    backward_semigroup,
    dpp_check,
    epstein_zin_demo,
    epstein_zin_ode_value,
    format_dpp_report,
    route_agreement,
    value_direct,
    value_regularity_probe,
)
from gbsde_lab.errors import ConfigurationError, ShapeError
from gbsde_lab.forward_sde import ControlGrid, StateDynamics
from gbsde_lab.generators import EpsteinZinParams, linear, parse_generator, zero
from gbsde_lab.io import read_csv
from gbsde_lab.sublinear import NodeFunction, VolatilityBounds
from oracles import tree_control_value

B = VolatilityBounds(0.5, 1.0)
TWO = ControlGrid(np.array([[0.5], [1.0]]))
ONE_CONTROL = ControlGrid.singleton(0.0)
SPEC = parse_generator("-0.5*y + 0.2*sin(z) + 0.3*u", lipschitz_z=0.2, lipschitz_y=0.5)


def _problem(controls=TWO, bounds=B, N=4, spec=SPEC, terminal=None, **kw):
    terminal = terminal or (lambda x: np.sin(2 * x) + 0.3 * x ** 2)
    kw.setdefault("max_nodes", 100_000)
    return RecursiveControlProblem(StateDynamics.control_volatility(), spec, terminal, controls, bounds,
                                   1.0, N, x0=0.1, **kw)


def test_two_control_quadratic_value():
    p = _problem(spec=zero(), terminal=lambda x: x ** 2, N=8)
    res = value_direct(p, 0, 0.3)
    want = tree_control_value(0.3, 0.0, 1.0, 4, [0.5, 1.0], "trinomial", lambda x: x ** 2,
                              lambda *a: 0.0, lambda *a: 0.0, TWO.points, sigma=lambda t, x, u: u[0])
    assert want == pytest.approx(0.34, abs=1e-12)
    assert res.value == pytest.approx(0.34, abs=1e-12)
    assert np.all(res.argmin[0] == 0)


@pytest.mark.parametrize("scheme", ["binomial", "trinomial"])
def test_value_matches_path_tree(scheme):
    p = _problem(N=3, shock_scheme=scheme)
    want = tree_control_value(0.1, 0.0, 1.0, 3, [0.5, 1.0], scheme, p.terminal,
                              lambda t, x, y, z, u: -0.5 * y + 0.2 * math.sin(z) + 0.3 * u[0],
                              lambda *a: 0.0, TWO.points, sigma=lambda t, x, u: u[0])
    assert abs(value_direct(p).value - want) < 1e-10


def test_value_is_below_every_constant_policy_and_attained_by_feedback():
    p = _problem()
    res = value_direct(p)
    for k in range(TWO.size):
        assert res.value <= backward_semigroup(p, 0, p.N, p.x0, k, p.terminal) + 1e-12
    attained = backward_semigroup(p, 0, p.N, p.x0, res.policy, p.terminal)
    assert attained == pytest.approx(res.value, abs=1e-10)


def test_more_controls_lower_more_ambiguity_raises():
    base = value_direct(_problem(controls=TWO.subset([1]))).value
    both = value_direct(_problem()).value
    assert both <= base + 1e-12
    wide = value_direct(_problem(bounds=VolatilityBounds(0.4, 1.2), domain=_problem().domain)).value
    narrow = value_direct(_problem(bounds=VolatilityBounds(0.6, 0.9), domain=_problem().domain)).value
    assert wide >= narrow - 1e-12


@settings(max_examples=15, deadline=None)
@given(shift=st.floats(-1, 1), scale=st.floats(0, 2))
def test_value_monotone_in_terminal(shift, scale):
    lo = value_direct(_problem(N=3, terminal=lambda x: np.cos(x))).value
    hi = value_direct(_problem(N=3, terminal=lambda x: np.cos(x) + scale * x ** 2 + abs(shift))).value
    assert hi >= lo - 1e-12


def test_array_start_points_and_terminal_level():
    p = _problem(N=3)
    xs = np.array([-0.2, 0.1, 0.4])
    many = value_direct(p, 0, xs).value
    single = [value_direct(p, 0, float(x)).value for x in xs]
    assert np.allclose(many, single, atol=1e-12)
    assert value_direct(p, 3, 0.5).value == pytest.approx(p.terminal(np.array(0.5)))


def test_feedback_policy_lookup():
    pol = FeedbackPolicy(2, (np.array([-1.0, 0.0, 1.0]),), (np.array([0, 1, 0]),))
    assert pol(2, np.array([-0.9, 0.1, 0.6])).tolist() == [0, 1, 0]
    with pytest.raises(ConfigurationError):
        pol(3, np.zeros(1))


def test_semigroup_contract():
    p = _problem(N=4)
    with pytest.raises(ConfigurationError):
        backward_semigroup(p, 3, 2, 0.0, 0, p.terminal)
    with pytest.raises(ConfigurationError):
        backward_semigroup(p, 0, 2, 0.0, "greedy", p.terminal)
    with pytest.raises(ShapeError):
        backward_semigroup(p, 0, 2, 0.0, 0, NodeFunction(2, np.zeros(2)))
    assert backward_semigroup(p, 2, 2, 0.3, 0, lambda x: 2 * x) == pytest.approx(0.6)
    # constant terminal under a zero driver stays constant
    q = _problem(spec=zero())
    assert backward_semigroup(q, 0, 3, 0.1, 1, lambda x: np.full_like(x, 1.5)) == pytest.approx(1.5, abs=1e-14)


def test_dpp_on_exact_lattice():
    p = _problem(N=4)
    reps = [dpp_check(p, 0, s) for s in range(5)]
    assert all(r["passed"] and r["residual"] < 1e-12 for r in reps)
    assert not reps[2]["grid_regime"]
    text = format_dpp_report(reps)
    assert text.count("\n") >= 5


def test_regularity_probe_and_route_agreement_run():
    p = RecursiveControlProblem(StateDynamics.constant(), zero(), lambda x: np.sin(2 * x), ONE_CONTROL, B,
                                1.0, 16, x0=0.3, max_nodes=400)
    rep = value_regularity_probe(p, xs=np.linspace(-0.5, 0.5, 5))
    for key in ("lipschitz", "growth", "holder"):
        assert math.isfinite(rep["coarse"][key]) and key in rep["relative_change"]
    ra = route_agreement(p, -4.0, 4.0, 81, 64)
    assert ra["gap"] < 0.05


def test_csv_rows(tmp_path):
    res = value_direct(_problem(N=2))
    res.to_csv(tmp_path / "v.csv")
    schema, cols, rows = read_csv(tmp_path / "v.csv")
    assert schema == "gbsde_lab.value/1" and cols == ["t", "x", "V", "argmin_u"]
    assert rows[0][2] == res.value and rows[-1][3] == -1.0


def test_epstein_zin_ode_value():
    p = EpsteinZinParams(0.1, 2.0, 1.5)
    # zero consumption: dV/dt = -mu V with mu = |1-gamma| delta / |1-1/psi| = 0.3, V(T) = -w
    assert epstein_zin_ode_value(p, 1.0, 1.0) == pytest.approx(-math.exp(0.3), rel=1e-8)
    assert epstein_zin_ode_value(p, 2.0, 0.5) == pytest.approx(-2.0 * math.exp(0.15), rel=1e-8)
    with pytest.raises(ConfigurationError):
        epstein_zin_demo(EpsteinZinDemo(EpsteinZinParams(0.1, 0.5, 2.0)))
