import io
import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from gbsde_lab import config
from gbsde_lab.cli import main
from gbsde_lab.errors import ConfigurationError
from gbsde_lab.io import read_csv


def _run(tmp_path, command, cfg, *extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = io.StringIO()
    code = main([command, "--config", str(path), "--out", str(tmp_path / "out"), *extra], stdout=out)
    return code, out.getvalue()


G_HEAT = {
    "version": 1,
    "problem": {"T": 1.0, "x0": 0.0, "bounds": {"sigma_low": 0.5, "sigma_high": 1.0}, "terminal": "x^2",
                "driver": {"preset": "linear", "params": {"a": -1.0}}},
    "discretization": {"N": 8, "M": 41, "x_min": -3.0, "x_max": 3.0, "max_nodes": 500},
}


def test_round_trip_and_idempotent_resolve():
    text = config.dumps(G_HEAT)
    assert config.loads(text) == G_HEAT
    assert text.endswith("}\n") and config.dumps(config.loads(text)) == text
    r = config.resolve(G_HEAT)
    assert config.resolve(r) == r
    assert r["discretization"]["vol_grid_size"] == 2 and r["problem"]["terminal"] == "x^2"


@settings(max_examples=30, deadline=None)
@given(N=st.integers(1, 64), M=st.integers(5, 99), T=st.floats(0.1, 5), seed=st.integers(0, 1000))
def test_round_trip_property(N, M, T, seed):
    cfg = {"version": 1, "problem": {"T": T}, "discretization": {"N": N, "M": M}, "run": {"seed": seed}}
    assert config.loads(config.dumps(cfg)) == cfg


@pytest.mark.parametrize("cfg,key", [
    ({"version": 1, "problem": {"bogus": 1}}, "problem.bogus"),
    ({"version": 1, "extra": {}}, "extra"),
    ({"problem": {}}, "version"),
    ({"version": 2}, "version"),
    ({"version": 1, "discretization": {"N": 0}}, "discretization.N"),
    ({"version": 1, "problem": {"bounds": {"sigma_low": 1.0}}}, "problem.bounds.sigma_high"),
    ({"version": 1, "problem": {"bounds": {"sigma_low": 2.0, "sigma_high": 1.0}}}, "problem.bounds.sigma_low"),
    ({"version": 1, "run": {"refine": [{"N": 4, "K": 1}]}}, "run.refine[0].K"),
])
def test_validation_names_the_key(cfg, key):
    with pytest.raises(ConfigurationError) as exc:
        config.validate(cfg)
    assert exc.value.key_path == key


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="line 1"):
        config.loads("{")
    with pytest.raises(ConfigurationError):
        config.load(tmp_path / "nope.json")


def test_builders():
    spec = config.build_driver({"f": "-y + 0.5*z", "lipschitz_z": 0.5})
    assert spec.lipschitz_z == 0.5 and float(spec.f(0, 0, 1.0, 2.0, 0.0)) == 0.0
    with pytest.raises(ConfigurationError) as exc:
        config.build_driver({"f": "y +"})
    assert exc.value.key_path == "problem.driver.f"
    with pytest.raises(ConfigurationError):
        config.build_driver({"preset": "linear", "params": {"q": 1}})
    dyn = config.build_dynamics({"b": "-x", "sigma": "u"})
    b, h, s = dyn.coefficients(0.0, 2.0, [[0.7]])
    assert float(b[0]) == -2.0 and float(s[0]) == pytest.approx(0.7)
    with pytest.raises(ConfigurationError):
        config.build_controls({"points": [1.0, [1.0, 2.0]]})
    assert config.build_controls({"intervals": [[0, 1]], "points_per_factor": 3}).size == 3
    assert config.build_terminal("x^2")(3.0) == 9.0


def test_exit_codes(tmp_path):
    assert _run(tmp_path, "solve-bsde", G_HEAT)[0] == 0
    assert _run(tmp_path, "solve-bsde", {"version": 1, "problem": {"oops": 1}})[0] == 2
    assert _run(tmp_path, "solve-bsde", dict(G_HEAT, problem=dict(G_HEAT["problem"], terminal="x +")))[0] == 2
    assert main(["frobnicate"]) == 2
    assert main(["solve-hjb", "--threads", "0"], stdout=io.StringIO()) == 2
    # a driver that fails to evaluate is a numerical failure
    bad = dict(G_HEAT, problem=dict(G_HEAT["problem"], terminal="x", driver={"f": "sqrt(y)"}))
    assert _run(tmp_path, "solve-hjb", bad)[0] == 3
    strict = dict(G_HEAT, discretization=dict(G_HEAT["discretization"], M=201, N=4, cfl="strict"))
    code, _ = _run(tmp_path, "solve-hjb", strict)
    assert code == 2


def test_dry_run_writes_nothing(tmp_path):
    for command in ("solve-bsde", "solve-hjb", "value", "dpp-check", "validate-generator"):
        code, text = _run(tmp_path, command, G_HEAT, "--dry-run")
        assert code == 0 and "resolved config" in text
    assert not (tmp_path / "out").exists()


def test_outputs_are_bit_identical_across_runs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        d.mkdir()
        path = d / "cfg.json"
        path.write_text(json.dumps(G_HEAT))
        for command in ("solve-bsde", "solve-hjb", "value"):
            assert main([command, "--config", str(path), "--out", str(d / "out")], stdout=io.StringIO()) == 0
    for name in ("bsde.csv", "hjb.csv", "value.csv"):
        assert (a / "out" / name).read_bytes() == (b / "out" / name).read_bytes()
    schema, cols, _ = read_csv(a / "out" / "bsde.csv")
    assert schema == "gbsde_lab.bsde/1" and cols[0] == "level"


def test_solve_bsde_ladder_and_hjb_refinement(tmp_path):
    cfg = dict(G_HEAT, problem=dict(G_HEAT["problem"], terminal="x", driver={"preset": "neg_sqrt"}),
               run={"ladder": [1, 2, 4]}, output={"csv": False})
    code, text = _run(tmp_path, "solve-bsde", cfg)
    assert code == 0 and "gaps strictly decreasing: true" in text
    cfg = dict(G_HEAT, run={"refine": [{"M": 21, "N_hjb": 20}, {"M": 41, "N_hjb": 80}, {"M": 81, "N_hjb": 320}]},
               output={"csv": False, "gnuplot": True})
    code, text = _run(tmp_path, "solve-hjb", cfg)
    assert code == 0 and "refinement table" in text
    assert (tmp_path / "out" / "hjb.dat").exists()


def test_value_dpp_and_validate_commands(tmp_path):
    cfg = {"version": 1,
           "problem": {"x0": 0.3, "terminal": "x^2", "driver": {"preset": "linear", "params": {"a": 0.0}},
                       "dynamics": {"preset": "control_volatility"}, "controls": {"points": [0.5, 1.0]}},
           "discretization": {"N": 4, "M": 41, "N_hjb": 40},
           "run": {"routes": True, "refine": [{"N": 4}, {"N": 8}]}}
    code, text = _run(tmp_path, "value", cfg)
    assert code == 0 and "route agreement" in text
    first = text.splitlines()[0]
    assert first.startswith("V(t_0, 0.3) = ") and float(first.split("= ")[1]) == pytest.approx(0.34, abs=1e-12)
    code, text = _run(tmp_path, "dpp-check", cfg)
    assert code == 0 and "residual decreasing under refinement: true" in text
    code, text = _run(tmp_path, "validate-generator", {"version": 1, "problem": {"driver": {"f": "-y + 2*z",
                                                                                              "lipschitz_z": 1.0}}})
    assert code == 0 and "overall: FAIL" in text


def test_epstein_zin_command(tmp_path):
    ok = {"version": 1, "epstein_zin": {"delta": 0.1, "gamma": 2.0, "psi": 1.5, "N": 4, "M": 21, "N_hjb": 20}}
    code, text = _run(tmp_path, "epstein-zin", ok)
    assert code == 0 and "domain violations = 0" in text
    schema, cols, rows = read_csv(tmp_path / "out" / "epstein_zin_policy.csv")
    assert schema == "gbsde_lab.ez_policy/1" and cols == ["t", "w", "pi", "c", "V"] and len(rows) == 4
    bad = {"version": 1, "epstein_zin": {"delta": 0.1, "gamma": 0.5, "psi": 2.0}}
    assert _run(tmp_path, "epstein-zin", bad)[0] == 2
    assert _run(tmp_path, "epstein-zin", {"version": 1})[0] == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "gbsde_lab", "validate-generator", "--dry-run"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "dry run: validate-generator" in out.stdout
