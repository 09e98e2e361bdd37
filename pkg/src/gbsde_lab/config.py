"""Experiment configuration: JSON files checked against a schema.

Top-level sections are ``version`` (required, must be 1), ``problem``,
``discretization``, ``run``, ``output`` and ``epstein_zin``. Unknown keys
are rejected with their key path. ``dumps`` is the canonical serializer
(sorted keys, two-space indent) and ``loads(dumps(c)) == c``.
"""
import json

import jsonschema
import numpy as np

from .errors import ConfigurationError, ParseError
from .forward_sde import ControlGrid, StateDynamics
from .generators import compile_expr, parse_generator, preset
from .sublinear import SHOCK_SCHEMES, VolatilityBounds

__all__ = ["SCHEMA", "CONFIG_VERSION", "load", "loads", "dumps", "validate", "resolve",
           "build_bounds", "build_driver", "build_terminal", "build_dynamics", "build_controls"]

CONFIG_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_interval = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_expr = {"type": "string", "minLength": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_DRIVER = _obj({
    "preset": {"enum": ["linear", "neg_sqrt", "epstein_zin", "custom"]},
    "params": {"type": "object"},
    "f": _expr,
    "g": _expr,
    "lipschitz_z": _nonneg,
    "mu": _num,
    "growth": _nonneg,
    "lipschitz_y": {"anyOf": [_nonneg, {"type": "null"}]},
    "decreasing_y": {"type": "boolean"},
})

_DYNAMICS = _obj({
    "preset": {"enum": ["constant", "control_volatility", "geometric", "wealth"]},
    "params": {"type": "object"},
    "b": _expr,
    "h": _expr,
    "sigma": _expr,
})

_CONTROLS = _obj({
    "points": {"type": "array", "minItems": 1,
               "items": {"anyOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}},
    "intervals": {"type": "array", "items": _interval, "minItems": 1},
    "points_per_factor": {"type": "integer", "minimum": 2},
})

_BOX = _obj({"t": _interval, "x": _interval, "y": _interval, "z": _interval,
             "u": {"type": "array", "items": _interval}})

SCHEMA = _obj({
    "version": {"const": CONFIG_VERSION},
    "problem": _obj({
        "T": _pos,
        "t0": _nonneg,
        "x0": _num,
        "bounds": _obj({"sigma_low": _pos, "sigma_high": _pos}, required=("sigma_low", "sigma_high")),
        "driver": _DRIVER,
        "terminal": _expr,
        "dynamics": _DYNAMICS,
        "controls": _CONTROLS,
        "domain": _interval,
    }),
    "discretization": _obj({
        "N": _posint,
        "M": {"type": "integer", "minimum": 5},
        "N_hjb": _posint,
        "x_min": _num,
        "x_max": _num,
        "vol_grid_size": _posint,
        "shock_scheme": {"enum": sorted(SHOCK_SCHEMES)},
        "max_nodes": _posint,
        "cfl": {"enum": ["auto", "strict"]},
    }),
    "run": _obj({
        "ladder": {"type": "array", "items": _pos, "minItems": 1},
        "t_index": {"type": "integer", "minimum": 0},
        "s_index": {"type": "integer", "minimum": 0},
        "x": _num,
        "refine": {"type": "array", "minItems": 1,
                   "items": _obj({"N": _posint, "M": {"type": "integer", "minimum": 5}, "N_hjb": _posint})},
        "routes": {"type": "boolean"},
        "samples": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
        "box": _BOX,
        "tolerance": _pos,
    }),
    "output": _obj({
        "dir": {"type": "string", "minLength": 1},
        "prefix": {"type": "string"},
        "csv": {"type": "boolean"},
        "gnuplot": {"type": "boolean"},
    }),
    "epstein_zin": _obj({
        "delta": _pos, "gamma": _pos, "psi": _pos,
        "c_low": _nonneg, "c_high": _pos,
        "r": _num, "b_rate": _num, "vol": _pos,
        "pi_interval": _interval,
        "points": {"type": "integer", "minimum": 2},
        "w0": _pos, "T": _pos, "N": _posint,
        "sigma_low": _pos, "sigma_high": _pos,
        "w_domain": _interval,
        "M": {"type": "integer", "minimum": 5}, "N_hjb": _posint,
    }, required=("delta", "gamma", "psi")),
}, required=("version",))

DEFAULTS = {
    "problem": {"T": 1.0, "t0": 0.0, "x0": 0.0, "bounds": {"sigma_low": 0.5, "sigma_high": 1.0},
                "driver": {"preset": "linear", "params": {"a": 0.0}}, "terminal": "x",
                "dynamics": {"preset": "constant"}, "controls": {"points": [0.0]}},
    "discretization": {"N": 32, "M": 201, "vol_grid_size": 2, "shock_scheme": "trinomial",
                       "max_nodes": 4000, "cfl": "auto"},
    "run": {"t_index": 0, "samples": 256, "seed": 0, "routes": False},
    "output": {"dir": "out", "prefix": "", "csv": True, "gnuplot": False},
}


def _path(error):
    parts = [str(p) if not isinstance(p, int) else f"[{p}]" for p in error.absolute_path]
    out = ""
    for p in parts:
        out += p if p.startswith("[") else ("." + p if out else p)
    return out or "<root>"


def validate(cfg):
    """Raise ``ConfigurationError`` naming the first offending key path."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    if "version" not in cfg:
        raise ConfigurationError("missing required field", key_path="version")
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(cfg),
                    key=lambda e: (len(list(e.absolute_path)), list(map(str, e.absolute_path))))
    if errors:
        e = errors[0]
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            base = _path(e)
            key = extra[0] if base == "<root>" else f"{base}.{extra[0]}"
            raise ConfigurationError("unknown key", key_path=key)
        if e.validator == "required":
            missing = [k for k in e.validator_value if k not in e.instance][0]
            base = _path(e)
            raise ConfigurationError("missing required field",
                                     key_path=missing if base == "<root>" else f"{base}.{missing}")
        raise ConfigurationError(e.message, key_path=_path(e))
    prob = cfg.get("problem", {})
    b = prob.get("bounds")
    if b and b["sigma_low"] > b["sigma_high"]:
        raise ConfigurationError("sigma_low must not exceed sigma_high", key_path="problem.bounds.sigma_low")
    disc = cfg.get("discretization", {})
    if "x_min" in disc and "x_max" in disc and not disc["x_min"] < disc["x_max"]:
        raise ConfigurationError("x_min must be below x_max", key_path="discretization.x_min")
    ez = cfg.get("epstein_zin")
    if ez and ez.get("sigma_low", 0.5) > ez.get("sigma_high", 1.0):
        raise ConfigurationError("sigma_low must not exceed sigma_high", key_path="epstein_zin.sigma_low")
    return cfg


def loads(text):
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return validate(cfg)


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
    return loads(text)


def dumps(cfg):
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if k in ("driver", "dynamics", "controls"):
            out[k] = v
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(cfg):
    """Config with defaults filled in; idempotent."""
    validate(cfg)
    out = {"version": cfg["version"]}
    for section, defaults in DEFAULTS.items():
        out[section] = _merge(defaults, cfg.get(section, {}))
    if "epstein_zin" in cfg:
        out["epstein_zin"] = dict(cfg["epstein_zin"])
    return validate(out)


def build_bounds(section):
    return VolatilityBounds(section["sigma_low"], section["sigma_high"])


def build_driver(section):
    """``GeneratorSpec`` from a preset (with ``params``) or ``f``/``g`` expressions."""
    consts = {k: section[k] for k in ("lipschitz_z", "mu", "growth", "lipschitz_y", "decreasing_y") if k in section}
    if "f" in section or section.get("preset") == "custom":
        if "f" not in section:
            raise ConfigurationError("custom driver needs an expression", key_path="problem.driver.f")
        try:
            return parse_generator(section["f"], section.get("g", "0"), **consts)
        except ParseError as exc:
            raise ConfigurationError(str(exc), key_path="problem.driver.f") from exc
    name = section.get("preset", "linear")
    try:
        spec = preset(name, **section.get("params", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for preset {name!r}: {exc}", key_path="problem.driver.params") from exc
    return spec.with_(**consts) if consts else spec


def _compile(text, key):
    try:
        return compile_expr(text)
    except ParseError as exc:
        raise ConfigurationError(str(exc), key_path=key) from exc


def build_terminal(text):
    """Terminal function of the state from an expression in ``x``."""
    fn = _compile(text, "problem.terminal")

    def terminal(x):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(fn(0.0, x, 0.0, 0.0, 0.0), x.shape)

    terminal.source = text
    return terminal


def build_dynamics(section):
    if any(k in section for k in ("b", "h", "sigma")):
        if "preset" in section:
            raise ConfigurationError("give either a preset or expressions", key_path="problem.dynamics.preset")
        parts = {}
        for key, default in (("b", "0"), ("h", "0"), ("sigma", "1")):
            fn = _compile(section.get(key, default), f"problem.dynamics.{key}")
            parts[key] = (lambda f: lambda t, x, u: f(t, x, 0.0, 0.0, u))(fn)
        return StateDynamics(b=parts["b"], h=parts["h"], sigma=parts["sigma"], name="expressions")
    name = section.get("preset", "constant")
    factory = {"constant": StateDynamics.constant, "control_volatility": StateDynamics.control_volatility,
               "geometric": StateDynamics.geometric, "wealth": StateDynamics.wealth}[name]
    try:
        return factory(**section.get("params", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for dynamics {name!r}: {exc}",
                                 key_path="problem.dynamics.params") from exc


def build_controls(section):
    if "intervals" in section:
        return ControlGrid.from_intervals([tuple(iv) for iv in section["intervals"]],
                                          section.get("points_per_factor", 9))
    pts = section.get("points", [0.0])
    rows = [[p] if not isinstance(p, list) else p for p in pts]
    if len({len(r) for r in rows}) != 1:
        raise ConfigurationError("control points must share one dimension", key_path="problem.controls.points")
    return ControlGrid(np.array(rows, dtype=np.float64))
