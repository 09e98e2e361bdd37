"""Regularizations of a driver: inf-convolution, truncation, exponential transform."""
from dataclasses import dataclass
import math
import warnings

import numpy as np

from .. import _kernels
from ..errors import ConfigurationError
from .spec import GeneratorSpec

__all__ = [
    "RegularizationParams",
    "InfConvolution",
    "inf_convolve",
    "regularize_spec",
    "truncate",
    "truncate_spec",
    "project",
    "exp_transform",
    "transform_solution",
    "inverse_transform_solution",
]


@dataclass(frozen=True)
class RegularizationParams:
    """Search grid for the inf-convolution.

    Each query searches ``points`` values on ``[y - R, y + R]`` (``q = y``
    included), then refines ``refine`` times on ``+/- 2`` spacings around
    each of the ``branches`` best local minima of the first stage. ``R = (|phi(t,x,0,z,u)| + growth*(1+|y|))/n + pad``.
    """

    points: int = 201
    refine: int = 3
    pad: float = 1.0
    branches: int = 3

    def __post_init__(self):
        if self.points < 3:
            raise ConfigurationError("inf-convolution grid needs at least 3 points")
        if self.points % 2 == 0:
            object.__setattr__(self, "points", self.points + 1)
        if self.refine < 0 or self.pad <= 0 or self.branches < 1:
            raise ConfigurationError("refine must be >= 0, pad > 0 and branches >= 1")


class InfConvolution:
    """``phi_n(t,x,y,z,u) = min_q phi(t,x,q,z,u) + n|y - q|`` on a search grid.

    ``boundary_hits`` counts queries whose first-stage minimizer sat on the
    window edge, which signals a window too small or ``phi_n = -inf``.
    """

    def __init__(self, phi, n, growth, params=None):
        if not n > 0:
            raise ConfigurationError(f"inf-convolution level must be > 0, got {n!r}")
        self.phi = phi
        self.n = float(n)
        self.growth = float(growth)
        self.params = params or RegularizationParams()
        self.boundary_hits = 0

    def radius(self, t, x, y, z, u):
        zero = np.zeros_like(y)
        phi0 = np.abs(self.phi(t, x, zero, z, u))
        return (phi0 + self.growth * (1.0 + np.abs(y))) / self.n + self.params.pad

    def __call__(self, t, x, y, z, u=0.0):
        u = np.asarray(u, dtype=np.float64)
        scalar_u = u.ndim == 0
        shape = np.broadcast_shapes(np.shape(t), np.shape(x), np.shape(y), np.shape(z),
                                    u.shape if scalar_u else u.shape[:-1])
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), shape)
        x = np.broadcast_to(np.asarray(x, dtype=np.float64), shape)
        y = np.broadcast_to(np.asarray(y, dtype=np.float64), shape)
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), shape)
        if not scalar_u:
            u = np.broadcast_to(u, shape + u.shape[-1:])
        ue = u if scalar_u else u[..., None, :]
        P = self.params.points
        R = self.radius(t, x, y, z, u)
        offsets = np.linspace(-1.0, 1.0, P)
        q = y[..., None] + R[..., None] * offsets
        h = R * (2.0 / (P - 1))
        vals = np.asarray(self.phi(t[..., None], x[..., None], q, z[..., None], ue), dtype=np.float64)
        obj = vals + self.n * np.abs(y[..., None] - q)
        k = np.argmin(obj, axis=-1)
        hits = int(np.count_nonzero((k == 0) | (k == P - 1)))
        if hits:
            self.boundary_hits += hits
            warnings.warn(
                f"inf-convolution minimizer on the search-window edge at {hits} points "
                "(window too small or phi_n = -inf)", RuntimeWarning, stacklevel=2)
        # refine around the best few local minima, not only the global one:
        # a coarse grid can rank two nearly equal basins wrongly
        left = np.concatenate([np.full(obj.shape[:-1] + (1,), np.inf), obj[..., :-1]], axis=-1)
        right = np.concatenate([obj[..., 1:], np.full(obj.shape[:-1] + (1,), np.inf)], axis=-1)
        local = np.where((obj <= left) & (obj <= right), obj, np.inf)
        B = min(self.params.branches, P)
        cand = np.argsort(local, axis=-1, kind="stable")[..., :B]
        best = np.take_along_axis(obj, k[..., None], axis=-1)[..., 0]
        for b in range(B):
            kb = cand[..., b]
            live = np.isfinite(np.take_along_axis(local, kb[..., None], axis=-1)[..., 0])
            if not np.any(live):
                continue
            centre = np.take_along_axis(q, kb[..., None], axis=-1)[..., 0]
            cur = np.take_along_axis(obj, kb[..., None], axis=-1)[..., 0]
            hb = h
            for _ in range(self.params.refine):
                qq = centre[..., None] + (2.0 * hb)[..., None] * offsets
                qq[..., P // 2] = centre
                hb = hb * (4.0 / (P - 1))
                val, kk = self._stage(t, x, y, z, ue, qq)
                better = val < cur
                cur = np.where(better, val, cur)
                centre = np.where(better, np.take_along_axis(qq, kk[..., None], axis=-1)[..., 0], centre)
            best = np.where(live, np.minimum(best, cur), best)
        return best

    def _stage(self, t, x, y, z, ue, q):
        vals = self.phi(t[..., None], x[..., None], q, z[..., None], ue)
        # constant expressions come back as scalars
        vals = np.broadcast_to(np.asarray(vals, dtype=np.float64), q.shape)
        return _kernels.minplus_l1(vals, q, y, self.n)


def inf_convolve(phi, n, growth=1.0, params=None):
    """Inf-convolution of one driver component (see ``InfConvolution``)."""
    if params is not None and getattr(params, "points", 1) < 1:
        raise ConfigurationError("empty search grid")
    return InfConvolution(phi, n, growth, params)


def regularize_spec(spec, n, params=None):
    """Apply the inf-convolution of level ``n`` to ``f`` and ``g``.

    The result is ``n``-Lipschitz in ``y``; z-Lipschitz constant, growth and
    the decreasing flag carry over.
    """
    f = inf_convolve(spec.f, n, spec.growth, params)
    g = inf_convolve(spec.g, n, spec.growth, params)
    return spec.with_(f=f, g=g, lipschitz_y=float(n), name=f"{spec.name}[n={n:g}]")


def project(y, level):
    """Radial projection onto ``[-l, l]``."""
    if level < 0:
        raise ConfigurationError(f"truncation level must be >= 0, got {level!r}")
    return np.clip(y, -level, level)


def truncate(phi, level):
    """``phi^l(t,x,y,z,u) = phi(t,x,Pi_l(y),z,u)``."""
    if level < 0:
        raise ConfigurationError(f"truncation level must be >= 0, got {level!r}")

    def phi_l(t, x, y, z, u=0.0):
        return phi(t, x, project(np.asarray(y, dtype=np.float64), level), z, u)

    phi_l.level = level
    return phi_l


def truncate_spec(spec, level):
    return spec.with_(f=truncate(spec.f, level), g=truncate(spec.g, level),
                      name=f"{spec.name}[l={level:g}]")


def _rates(lam, t, dt):
    t = np.asarray(t, dtype=np.float64)
    if dt is None:
        rho = np.exp(lam * t)
        return rho, rho, lam
    dt = float(dt)
    lam_d = math.expm1(lam * dt) / dt if lam != 0.0 else 0.0
    return np.exp(lam * t), np.exp(lam * (t + dt)), lam_d


def exp_transform(spec, lam=None, dt=None):
    """Exponential change of variables ``Y' = e^{lam t} Y``.

    With ``dt=None`` this is the continuous-time map
    ``f'(t,y,z) = e^{lam t} f(t, e^{-lam t} y, e^{-lam t} z) - lam y`` and
    ``g' = e^{lam t} g(...)``. With a step ``dt`` the map is the exact
    counterpart for the one-step lattice scheme: the driver at time ``t``
    multiplies by ``e^{lam (t+dt)}``, ``z`` rescales with that factor, and
    ``lam`` becomes ``(e^{lam dt} - 1)/dt``. Then transformed lattice
    solutions equal transformed original solutions up to rounding.

    ``lam`` defaults to the declared ``mu``, which makes the transformed
    driver decreasing in ``y``.
    """
    lam = float(spec.mu if lam is None else lam)
    f0, g0 = spec.f, spec.g

    def f(t, x, y, z, u=0.0):
        rho, rho_next, lam_d = _rates(lam, t, dt)
        y = np.asarray(y, dtype=np.float64)
        return rho_next * f0(t, x, y / rho, np.asarray(z) / rho_next, u) - lam_d * y

    def g(t, x, y, z, u=0.0):
        rho, rho_next, _ = _rates(lam, t, dt)
        return rho_next * g0(t, x, np.asarray(y, dtype=np.float64) / rho, np.asarray(z) / rho_next, u)

    if lam == 0.0:
        return spec
    step = 0.0 if dt is None else float(dt)
    lam_d = _rates(lam, 0.0, dt)[2]
    return spec.with_(
        f=f, g=g, mu=spec.mu - lam,
        decreasing_y=spec.decreasing_y or spec.mu - lam <= 0.0,
        lipschitz_y=None if spec.lipschitz_y is None else spec.lipschitz_y * math.exp(abs(lam) * step) + abs(lam_d),
        name=f"{spec.name}[exp {lam:g}]",
    )


def transform_solution(Y, Z, dK, times, lam):
    """Map level lists ``(Y, Z, dK)`` to the transformed equation's solution.

    ``Y[n] -> e^{lam t_n} Y[n]``; ``Z[n]`` and ``dK[n]`` (step ``n -> n+1``)
    scale by ``e^{lam t_{n+1}}``. ``K`` itself is the running sum of the
    scaled increments, the lattice form of ``int e^{lam s} dK_s``.
    """
    times = np.asarray(times, dtype=np.float64)
    Yt = [np.exp(lam * times[n]) * np.asarray(Y[n]) for n in range(len(Y))]
    Zt = [np.exp(lam * times[n + 1]) * np.asarray(Z[n]) for n in range(len(Z))]
    dKt = [np.exp(lam * times[n + 1]) * np.asarray(dK[n]) for n in range(len(dK))]
    return Yt, Zt, dKt


def inverse_transform_solution(Y, Z, dK, times, lam):
    return transform_solution(Y, Z, dK, times, -lam)
