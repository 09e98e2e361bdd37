"""Epstein-Zin recursive-utility aggregator as a driver."""
from dataclasses import dataclass
import numpy as np

from ..errors import ConfigurationError, DomainError
from .spec import GeneratorSpec, _base

__all__ = ["EpsteinZinParams", "epstein_zin", "aggregator", "monotonicity_case", "require_case"]


@dataclass(frozen=True)
class EpsteinZinParams:
    delta: float
    gamma: float
    psi: float
    c_low: float = 0.0
    c_high: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be > 0, got {self.delta!r}")
        for name in ("gamma", "psi"):
            v = getattr(self, name)
            if not (v > 0 and v != 1):
                raise ConfigurationError(f"{name} must be > 0 and != 1, got {v!r}")
        if not 0 <= self.c_low < self.c_high:
            raise ConfigurationError(
                f"need 0 <= c_low < c_high, got [{self.c_low}, {self.c_high}]")


def monotonicity_case(params):
    """``"i"`` for gamma > 1, psi > 1; ``"ii"`` for gamma < 1, psi < 1; else None."""
    if params.gamma > 1 and params.psi > 1:
        return "i"
    if params.gamma < 1 and params.psi < 1:
        return "ii"
    return None


def require_case(params):
    case = monotonicity_case(params)
    if case is None:
        raise ConfigurationError(
            f"gamma={params.gamma}, psi={params.psi} satisfy neither gamma>1 and psi>1 "
            "nor gamma<1 and psi<1")
    return case


def aggregator(c, v, params, strict=True):
    """``delta/(1-1/psi) (1-gamma) v [(c / ((1-gamma) v)^{1/(1-gamma)})^{1-1/psi} - 1]``.

    ``v`` is the continuation utility. With ``strict`` a point with
    ``(1-gamma) v <= 0`` raises ``DomainError``; otherwise such points give nan.
    """
    d, gam, psi = params.delta, params.gamma, params.psi
    c = np.asarray(c, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = (1.0 - gam) * v
    bad = w <= 0
    if strict and np.any(bad):
        vb = float(np.atleast_1d(v)[np.atleast_1d(bad)][0])
        raise DomainError(f"Epstein-Zin aggregator needs (1-gamma)*v > 0, got v={vb} with gamma={gam}")
    if np.any(c < 0):
        raise DomainError("Epstein-Zin aggregator needs consumption >= 0")
    ws = np.where(bad, 1.0, w)
    ratio = c * ws ** (-1.0 / (1.0 - gam))
    out = d / (1.0 - 1.0 / psi) * ws * (ratio ** (1.0 - 1.0 / psi) - 1.0)
    return np.where(bad, np.nan, out)


def epstein_zin(params, consumption_index=0, strict=True):
    """Driver ``f(t, x, y, z, u) = aggregator(u[..., consumption_index], y)``, ``g = 0``.

    In both monotone cases the y-derivative is largest at ``c = 0``, where
    it equals ``|1-gamma| delta / |1-1/psi|``; that value is declared as ``mu``.
    """
    def f(t, x, y, z, u=0.0):
        u = np.asarray(u, dtype=np.float64)
        c = u if u.ndim == 0 else u[..., consumption_index]
        return _base(t, x, y, z) + aggregator(c, y, params, strict=strict)

    mu0 = abs(1.0 - params.gamma) * params.delta / abs(1.0 - 1.0 / params.psi)
    return GeneratorSpec(
        f=f, lipschitz_z=0.0, mu=float(mu0), growth=0.0, lipschitz_y=None,
        decreasing_y=False, name="epstein_zin",
        f_text=(f"epstein_zin(delta={params.delta}, gamma={params.gamma}, psi={params.psi})"),
        g_text="0",
    )
