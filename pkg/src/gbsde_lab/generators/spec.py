"""Driver pairs ``(f, g)`` and the named presets."""
from dataclasses import dataclass, replace
import math

import numpy as np

from ..errors import ConfigurationError
from .expr import compile_expr

__all__ = ["GeneratorSpec", "parse_generator", "linear", "neg_sqrt", "zero", "preset", "PRESETS"]


def _base(t, x, y, z):
    return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x), np.shape(y), np.shape(z)))


def _zero(t, x, y, z, u=0.0):
    return _base(t, x, y, z)


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver pair with declared regularity constants.

    ``f`` is the ``ds`` driver and ``g`` the ``d<B>`` driver; both are
    called as ``fn(t, x, y, z, u)`` with numpy broadcasting, where ``u``
    carries the control components on a trailing axis (``u[..., 0]`` is the
    first component). ``lipschitz_y=None`` declares the driver not
    Lipschitz in ``y``.
    """

    f: object
    g: object = _zero
    lipschitz_z: float = 0.0
    mu: float = 0.0
    growth: float = 0.0
    lipschitz_y: float = None
    decreasing_y: bool = False
    name: str = "custom"
    f_text: str = None
    g_text: str = None

    def __post_init__(self):
        for field_name in ("lipschitz_z", "growth"):
            v = getattr(self, field_name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{field_name} must be a finite number >= 0, got {v!r}")
        if self.lipschitz_y is not None and not (math.isfinite(self.lipschitz_y) and self.lipschitz_y >= 0):
            raise ConfigurationError(f"lipschitz_y must be >= 0 or None, got {self.lipschitz_y!r}")
        if not math.isfinite(self.mu):
            raise ConfigurationError(f"mu must be finite, got {self.mu!r}")

    @property
    def is_lipschitz_y(self):
        return self.lipschitz_y is not None

    def with_(self, **changes):
        return replace(self, **changes)


def parse_generator(f_expr, g_expr="0", *, lipschitz_z=0.0, mu=0.0, growth=0.0,
                    lipschitz_y=None, decreasing_y=False, name="custom"):
    """Build a ``GeneratorSpec`` from expression strings (see ``expr``)."""
    f = compile_expr(f_expr)
    g = compile_expr(g_expr)
    return GeneratorSpec(
        f=f, g=g, lipschitz_z=lipschitz_z, mu=mu, growth=growth,
        lipschitz_y=lipschitz_y, decreasing_y=decreasing_y, name=name,
        f_text=f_expr, g_text=g_expr,
    )


def linear(a=-1.0, b=0.0, c=0.0, ga=0.0, gb=0.0, gc=0.0):
    """``f = a*y + b*z + c`` and ``g = ga*y + gb*z + gc``."""
    a, b, c, ga, gb, gc = map(float, (a, b, c, ga, gb, gc))

    def f(t, x, y, z, u=0.0):
        return _base(t, x, y, z) + a * np.asarray(y, dtype=float) + b * np.asarray(z, dtype=float) + c

    def g(t, x, y, z, u=0.0):
        return _base(t, x, y, z) + ga * np.asarray(y, dtype=float) + gb * np.asarray(z, dtype=float) + gc

    return GeneratorSpec(
        f=f, g=g,
        lipschitz_z=max(abs(b), abs(gb)),
        mu=max(a, ga),
        growth=max(abs(a), abs(b), abs(ga), abs(gb)),
        lipschitz_y=max(abs(a), abs(ga)),
        decreasing_y=a <= 0 and ga <= 0,
        name="linear",
        f_text=f"{a}*y + {b}*z + {c}",
        g_text=f"{ga}*y + {gb}*z + {gc}",
    )


def zero():
    return linear(0.0, 0.0, 0.0)


def neg_sqrt(scale=1.0):
    """``f = -scale * sign(y) * sqrt(|y|)``: uniformly continuous, decreasing, not Lipschitz."""
    scale = float(scale)

    def f(t, x, y, z, u=0.0):
        y = np.asarray(y, dtype=float)
        return _base(t, x, y, z) - scale * np.sign(y) * np.sqrt(np.abs(y))

    return GeneratorSpec(
        f=f, lipschitz_z=0.0, mu=0.0, growth=scale, lipschitz_y=None,
        decreasing_y=True, name="neg_sqrt",
        f_text=f"-{scale}*sign(y)*sqrt(abs(y))", g_text="0",
    )


def preset(name, **params):
    """Look up a preset by name: linear, neg_sqrt, epstein_zin, custom."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown generator preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](**params)


def _custom(f, g="0", **kw):
    return parse_generator(f, g, **kw)


def _epstein_zin(**params):
    from .epstein_zin import EpsteinZinParams, epstein_zin

    cidx = params.pop("consumption_index", 0)
    return epstein_zin(EpsteinZinParams(**params), consumption_index=cidx)


PRESETS = {
    "linear": linear,
    "neg_sqrt": neg_sqrt,
    "epstein_zin": _epstein_zin,
    "custom": _custom,
}
