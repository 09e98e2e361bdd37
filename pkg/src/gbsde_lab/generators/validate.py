"""Sampled checks of the structural assumptions on a driver."""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.stats import qmc

from ..errors import ConfigurationError, DomainError, GeneratorEvaluationError

__all__ = ["EvaluationBox", "CheckResult", "AssumptionReport", "validate_assumptions", "LIPSCHITZ_LADDER"]

LIPSCHITZ_LADDER = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
_REL = 1e-9
_ABS = 1e-12


@dataclass(frozen=True)
class EvaluationBox:
    """Finite sampling box; ``u`` lists ``(lo, hi)`` per control component."""

    t: tuple = (0.0, 1.0)
    x: tuple = (-1.0, 1.0)
    y: tuple = (-1.0, 1.0)
    z: tuple = (-1.0, 1.0)
    u: tuple = ()

    def __post_init__(self):
        for name in ("t", "x", "y", "z"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigurationError(f"box.{name} must be a finite interval, got {(lo, hi)}")
        for i, (lo, hi) in enumerate(self.u):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigurationError(f"box.u[{i}] must be a finite interval, got {(lo, hi)}")

    def centre(self):
        mid = lambda iv: 0.5 * (iv[0] + iv[1])  # noqa: E731
        return mid(self.t), mid(self.x), mid(self.y), mid(self.z), tuple(mid(iv) for iv in self.u)


@dataclass
class CheckResult:
    """One assumption on one driver component.

    ``observed`` is the sampled worst value of the relevant quotient,
    ``violation`` is ``max(0, observed - declared)``; ``passed`` is None for
    purely informational checks.
    """

    name: str
    component: str
    declared: object
    observed: float
    violation: float
    passed: object
    witness: dict = None
    detail: dict = field(default_factory=dict)


@dataclass
class AssumptionReport:
    checks: list
    errors: list
    samples: int

    def get(self, name, component="f"):
        for c in self.checks:
            if c.name == name and c.component == component:
                return c
        raise KeyError((name, component))

    @property
    def passed(self):
        return not self.errors and all(c.passed is not False for c in self.checks)

    def to_text(self):
        lines = [f"assumption report ({self.samples} samples)"]
        for c in self.checks:
            status = "info" if c.passed is None else ("pass" if c.passed else "FAIL")
            lines.append(
                f"  {c.component}.{c.name:<14} declared={c.declared!s:<10} observed={c.observed:.6g} "
                f"violation={c.violation:.3g} {status}"
                + (f" witness={c.witness}" if c.witness and c.passed is False else "")
            )
        for e in self.errors:
            lines.append(f"  evaluation error: {e['message']} at {e['point']}")
        return "\n".join(lines)


def _sample(box, samples, seed):
    d = 6 + len(box.u)
    m = max(1, math.ceil(math.log2(max(samples, 2))))
    raw = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)[:samples]

    def scale(col, iv):
        return iv[0] + (iv[1] - iv[0]) * raw[:, col]

    t = scale(0, box.t)
    x = scale(1, box.x)
    y = scale(2, box.y)
    z = scale(3, box.z)
    y2 = scale(4, box.y)
    z2 = scale(5, box.z)
    u = np.stack([scale(6 + i, iv) for i, iv in enumerate(box.u)], axis=-1) if box.u else None
    # always include the box centre and the y = 0 slice
    tc, xc, yc, zc, uc = box.centre()
    y0 = min(max(0.0, box.y[0]), box.y[1])
    extra_t = np.array([tc, tc])
    extra_x = np.array([xc, xc])
    extra_y = np.array([yc, y0])
    extra_z = np.array([zc, zc])
    t = np.concatenate([t, extra_t])
    x = np.concatenate([x, extra_x])
    y = np.concatenate([y, extra_y])
    z = np.concatenate([z, extra_z])
    y2 = np.concatenate([y2, [box.y[1], box.y[0]]])
    z2 = np.concatenate([z2, [box.z[1], box.z[0]]])
    if u is not None:
        u = np.concatenate([u, np.array([uc, uc])])
    return t, x, y, z, y2, z2, u


def _safe_eval(fn, t, x, y, z, u, errors, component):
    uu = 0.0 if u is None else u
    try:
        out = np.asarray(fn(t, x, y, z, uu), dtype=np.float64)
        if np.all(np.isfinite(out)):
            return np.broadcast_to(out, np.shape(y)).copy()
    except (GeneratorEvaluationError, DomainError, FloatingPointError, ValueError, ZeroDivisionError):
        pass
    out = np.empty(np.shape(y))
    for i in range(out.size):
        ui = 0.0 if u is None else u[i]
        pt = {"t": float(t[i]), "x": float(x[i]), "y": float(y[i]), "z": float(z[i])}
        if u is not None:
            pt["u"] = [float(v) for v in ui]
        try:
            with np.errstate(all="raise"):
                v = float(np.asarray(fn(t[i], x[i], y[i], z[i], ui)))
            if not math.isfinite(v):
                raise GeneratorEvaluationError("non-finite value")
            out[i] = v
        except (GeneratorEvaluationError, DomainError, FloatingPointError, ValueError, ZeroDivisionError) as exc:
            out[i] = np.nan
            if len([e for e in errors if e["component"] == component]) < 10:
                errors.append({"component": component, "message": str(exc), "point": pt})
    return out


def _witness(i, t, x, y, z, u, **extra):
    w = {"t": float(t[i]), "x": float(x[i]), "y": float(y[i]), "z": float(z[i])}
    if u is not None:
        w["u"] = [float(v) for v in u[i]]
    w.update({k: float(v) for k, v in extra.items()})
    return w


def _worst(values):
    if values.size == 0 or np.all(np.isnan(values)):
        return -np.inf, None
    i = int(np.nanargmax(values))
    return float(values[i]), i


def validate_assumptions(spec, box=None, samples=256, seed=0, components=("f", "g")):
    """Sample the driver on ``box`` and compare with the declared constants.

    Checks per component: ``H4`` z-Lipschitz (declared ``lipschitz_z``),
    ``H5`` monotonicity (fitted mu vs declared ``mu``), ``H6`` growth in y,
    ``lipschitz_y`` through difference quotients on a shrinking ladder, and
    ``decreasing_y`` when declared. Evaluation failures are collected in
    ``errors`` with the offending point rather than raised.
    """
    if samples < 2:
        raise ConfigurationError(f"need samples >= 2, got {samples}")
    box = box or EvaluationBox()
    t, x, y, z, y2, z2, u = _sample(box, samples, seed)
    checks, errors = [], []
    for comp in components:
        fn = getattr(spec, comp)
        base = _safe_eval(fn, t, x, y, z, u, errors, comp)

        # H4: z-Lipschitz
        fz = _safe_eval(fn, t, x, y, z2, u, errors, comp)
        dz = np.abs(z - z2)
        ok = dz > 1e-12
        q = np.full(y.shape, np.nan)
        q[ok] = np.abs(base[ok] - fz[ok]) / dz[ok]
        obs, i = _worst(q)
        C = spec.lipschitz_z
        viol = max(0.0, obs - C)
        checks.append(CheckResult("H4", comp, C, obs, viol, viol <= _REL * C + _ABS,
                                  None if i is None else _witness(i, t, x, y, z, u, z2=z2[i])))

        # H5: monotonicity quotient
        fy = _safe_eval(fn, t, x, y2, z, u, errors, comp)
        dy = y - y2
        ok = np.abs(dy) > 1e-12
        q = np.full(y.shape, np.nan)
        q[ok] = dy[ok] * (base[ok] - fy[ok]) / dy[ok] ** 2
        obs, i = _worst(q)
        viol = max(0.0, obs - spec.mu)
        checks.append(CheckResult("H5", comp, spec.mu, obs, viol, viol <= _REL * abs(spec.mu) + _ABS,
                                  None if i is None else _witness(i, t, x, y, z, u, y2=y2[i]),
                                  {"fitted_mu": obs}))

        # H6: growth in y at z = 0, relative to the box point nearest y = 0
        zero = np.zeros_like(y)
        y_ref = np.full_like(y, min(max(0.0, box.y[0]), box.y[1]))
        fy0 = _safe_eval(fn, t, x, y, zero, u, errors, comp)
        f00 = _safe_eval(fn, t, x, y_ref, zero, u, errors, comp)
        q = (np.abs(fy0) - np.abs(f00)) / (1.0 + np.abs(y))
        obs, i = _worst(q)
        viol = max(0.0, obs - spec.growth)
        checks.append(CheckResult("H6", comp, spec.growth, obs, viol, viol <= _REL * spec.growth + _ABS,
                                  None if i is None else _witness(i, t, x, y, zero, u),
                                  {"fitted_growth": max(obs, 0.0)}))

        # y-Lipschitz on a shrinking ladder
        ladder = {}
        best = (-np.inf, None, None)
        for delta in LIPSCHITZ_LADDER:
            # step inward so both points stay in the box
            yd = np.where(y + delta <= box.y[1], y + delta, y - delta)
            fd = _safe_eval(fn, t, x, yd, z, u, errors, comp)
            q = np.abs(fd - base) / delta
            obs, i = _worst(q)
            ladder[delta] = obs
            if obs > best[0]:
                best = (obs, i, delta)
        obs, i, delta = best
        L = spec.lipschitz_y
        maxima = [ladder[d] for d in LIPSCHITZ_LADDER]
        divergent = bool(maxima[-1] > 10.0 * max(maxima[0], 1e-300))
        if L is None:
            viol, passed = 0.0, None
        else:
            viol = max(0.0, obs - L)
            passed = viol <= _REL * L + _ABS + 1e-6 * max(1.0, L)
        checks.append(CheckResult("lipschitz_y", comp, L, obs, viol, passed,
                                  None if i is None else _witness(i, t, x, y, z, u, delta=delta),
                                  {"ladder": ladder, "divergent": divergent}))

        if spec.decreasing_y:
            prod = dy * (base - fy)
            obs, i = _worst(prod)
            viol = max(0.0, obs)
            checks.append(CheckResult("decreasing_y", comp, True, obs, viol, viol <= _ABS,
                                      None if i is None else _witness(i, t, x, y, z, u, y2=y2[i])))
    return AssumptionReport(checks, errors, int(y.size))
