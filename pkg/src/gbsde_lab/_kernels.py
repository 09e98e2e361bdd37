"""Hot inner loops.

Every kernel has a numba ``@njit`` implementation and a pure-numpy twin
with identical semantics. The numba path is used when numba imports and
``GBSDE_LAB_DISABLE_NUMBA`` is unset (or ``0``). ``set_backend`` switches
at runtime, which the tests and the benchmark use to compare both paths.
"""
import os

import numpy as np

_FLAG = os.environ.get("GBSDE_LAB_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no", "off")

try:
    if _DISABLED:
        raise ImportError("numba disabled by GBSDE_LAB_DISABLE_NUMBA")
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

__all__ = [
    "HAVE_NUMBA",
    "backend",
    "set_backend",
    "interp_weights",
    "minplus_l1",
    "hjb_terms",
    "augmented_step",
]


# ---------------------------------------------------------------------------
# numpy implementations


def _interp_weights_np(xp, x, tol):
    """Bracketing index and weight of each ``x`` in sorted nodes ``xp``.

    Returns ``(j, w, n_clamped)`` such that the interpolant is
    ``(1 - w) * f[j] + w * f[j + 1]``. Points outside ``[xp[0], xp[-1]]``
    are clamped to the end node. Weights within ``tol`` (in position units)
    of a node snap to that node.
    """
    xp = np.asarray(xp, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    m = xp.shape[0]
    if m == 1:
        j = np.zeros(x.shape, dtype=np.int64)
        w = np.zeros(x.shape)
        return j, w, int(np.count_nonzero(np.abs(x - xp[0]) > tol))
    j = np.searchsorted(xp, x, side="right") - 1
    np.clip(j, 0, m - 2, out=j)
    left = xp[j]
    width = xp[j + 1] - left
    w = (x - left) / width
    low = x < xp[0] - tol
    high = x > xp[-1] + tol
    n_clamped = int(np.count_nonzero(low) + np.count_nonzero(high))
    snap = tol / width
    w = np.where(w < snap, 0.0, np.where(w > 1.0 - snap, 1.0, w))
    np.clip(w, 0.0, 1.0, out=w)
    return j.astype(np.int64), w, n_clamped


def _minplus_l1_np(phi_vals, q, y, n):
    """min over the last axis of ``phi_vals + n * |y - q|`` and its argmin."""
    obj = phi_vals + n * np.abs(y[..., None] - q)
    k = np.argmin(obj, axis=-1)
    return np.take_along_axis(obj, k[..., None], axis=-1)[..., 0], k


def _hjb_terms_np(v, dx, diff, drift):
    """Interior stencil ``diff * D2 v + drift * upwind D1 v``.

    ``v`` has shape (M,), ``diff`` and ``drift`` shape (M - 2, K).
    """
    d2 = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (dx * dx)
    fwd = (v[2:] - v[1:-1]) / dx
    bwd = (v[1:-1] - v[:-2]) / dx
    pos = np.maximum(drift, 0.0)
    neg = np.minimum(drift, 0.0)
    return diff * d2[:, None] + pos * fwd[:, None] + neg * bwd[:, None]


def _augmented_step_np(w_next, j, wx, a_new, a_grid, weights):
    """One step of the sup recursion on the (node, accumulator) product grid.

    ``w_next``: (M1, A) values at the next level. ``j``, ``wx``: (M0, S, K)
    state interpolation data. ``a_new``: (M0, S, A) accumulator after the
    step for each current accumulator grid value. Returns (M0, A): max over
    scenarios of the shock-weighted average.
    """
    m0, s_count, k_count = j.shape
    a_count = a_grid.shape[0]
    ja, wa, _ = _interp_weights_np(a_grid, a_new, 0.0)
    # state interpolation, then accumulator interpolation
    out = np.full((m0, a_count), -np.inf)
    for s in range(s_count):
        acc = np.zeros((m0, a_count))
        for k in range(k_count):
            rows_lo = w_next[j[:, s, k]]
            rows_hi = w_next[np.minimum(j[:, s, k] + 1, w_next.shape[0] - 1)]
            rows = (1.0 - wx[:, s, k])[:, None] * rows_lo + wx[:, s, k][:, None] * rows_hi
            jj = ja[:, s, :]
            ww = wa[:, s, :]
            lo = np.take_along_axis(rows, jj, axis=1)
            hi = np.take_along_axis(rows, np.minimum(jj + 1, a_count - 1), axis=1)
            acc += weights[k] * ((1.0 - ww) * lo + ww * hi)
        out = np.maximum(out, acc)
    return out


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _interp_weights_nb_flat(xp, x, tol):
        m = xp.shape[0]
        n = x.shape[0]
        j = np.zeros(n, dtype=np.int64)
        w = np.zeros(n)
        clamped = 0
        if m == 1:
            for i in range(n):
                if abs(x[i] - xp[0]) > tol:
                    clamped += 1
            return j, w, clamped
        for i in range(n):
            xi = x[i]
            if xi < xp[0] - tol or xi > xp[m - 1] + tol:
                clamped += 1
            lo = 0
            hi = m - 1
            # largest lo with xp[lo] <= xi, restricted to [0, m - 2]
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if xp[mid] <= xi:
                    lo = mid
                else:
                    hi = mid
            if lo > m - 2:
                lo = m - 2
            width = xp[lo + 1] - xp[lo]
            wi = (xi - xp[lo]) / width
            snap = tol / width
            if wi < snap:
                wi = 0.0
            elif wi > 1.0 - snap:
                wi = 1.0
            j[i] = lo
            w[i] = wi
        return j, w, clamped

    def _interp_weights_nb(xp, x, tol):
        xp = np.ascontiguousarray(xp, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape
        j, w, c = _interp_weights_nb_flat(xp, np.ascontiguousarray(x).reshape(-1), float(tol))
        return j.reshape(shape), w.reshape(shape), int(c)

    @njit(cache=True)
    def _minplus_l1_nb_flat(phi_vals, q, y, n):
        rows, cols = phi_vals.shape
        best = np.empty(rows)
        arg = np.zeros(rows, dtype=np.int64)
        for r in range(rows):
            b = np.inf
            a = 0
            for c in range(cols):
                v = phi_vals[r, c] + n * abs(y[r] - q[r, c])
                if v < b:
                    b = v
                    a = c
            best[r] = b
            arg[r] = a
        return best, arg

    def _minplus_l1_nb(phi_vals, q, y, n):
        phi_vals = np.asarray(phi_vals, dtype=np.float64)
        shape = phi_vals.shape[:-1]
        cols = phi_vals.shape[-1]
        q = np.broadcast_to(q, phi_vals.shape)
        y = np.broadcast_to(y, shape)
        best, arg = _minplus_l1_nb_flat(
            np.ascontiguousarray(phi_vals).reshape(-1, cols),
            np.ascontiguousarray(q).reshape(-1, cols),
            np.ascontiguousarray(y).reshape(-1),
            float(n),
        )
        return best.reshape(shape), arg.reshape(shape)

    @njit(cache=True)
    def _hjb_terms_nb_impl(v, dx, diff, drift):
        mi, kk = diff.shape
        out = np.empty((mi, kk))
        inv2 = 1.0 / (dx * dx)
        inv = 1.0 / dx
        for i in range(mi):
            d2 = (v[i + 2] - 2.0 * v[i + 1] + v[i]) * inv2
            fwd = (v[i + 2] - v[i + 1]) * inv
            bwd = (v[i + 1] - v[i]) * inv
            for k in range(kk):
                d = drift[i, k]
                if d > 0.0:
                    out[i, k] = diff[i, k] * d2 + d * fwd
                else:
                    out[i, k] = diff[i, k] * d2 + d * bwd
        return out

    def _hjb_terms_nb(v, dx, diff, drift):
        return _hjb_terms_nb_impl(
            np.ascontiguousarray(v, dtype=np.float64),
            float(dx),
            np.ascontiguousarray(diff, dtype=np.float64),
            np.ascontiguousarray(drift, dtype=np.float64),
        )

    @njit(cache=True)
    def _augmented_step_nb_impl(w_next, j, wx, a_new, a_grid, weights):
        m0, s_count, k_count = j.shape
        m1, a_count = w_next.shape
        out = np.full((m0, a_count), -np.inf)
        for i in range(m0):
            for s in range(s_count):
                for a in range(a_count):
                    an = a_new[i, s, a]
                    # accumulator bracket
                    if a_count == 1:
                        ja = 0
                        wa = 0.0
                    else:
                        lo = 0
                        hi = a_count - 1
                        while hi - lo > 1:
                            mid = (lo + hi) // 2
                            if a_grid[mid] <= an:
                                lo = mid
                            else:
                                hi = mid
                        if lo > a_count - 2:
                            lo = a_count - 2
                        ja = lo
                        wa = (an - a_grid[lo]) / (a_grid[lo + 1] - a_grid[lo])
                        if wa < 0.0:
                            wa = 0.0
                        elif wa > 1.0:
                            wa = 1.0
                    ja1 = ja + 1 if ja + 1 < a_count else ja
                    acc = 0.0
                    for k in range(k_count):
                        jn = j[i, s, k]
                        jn1 = jn + 1 if jn + 1 < m1 else jn
                        wxk = wx[i, s, k]
                        lo_v = (1.0 - wxk) * w_next[jn, ja] + wxk * w_next[jn1, ja]
                        hi_v = (1.0 - wxk) * w_next[jn, ja1] + wxk * w_next[jn1, ja1]
                        acc += weights[k] * ((1.0 - wa) * lo_v + wa * hi_v)
                    if acc > out[i, a]:
                        out[i, a] = acc
        return out

    def _augmented_step_nb(w_next, j, wx, a_new, a_grid, weights):
        return _augmented_step_nb_impl(
            np.ascontiguousarray(w_next, dtype=np.float64),
            np.ascontiguousarray(j, dtype=np.int64),
            np.ascontiguousarray(wx, dtype=np.float64),
            np.ascontiguousarray(a_new, dtype=np.float64),
            np.ascontiguousarray(a_grid, dtype=np.float64),
            np.ascontiguousarray(weights, dtype=np.float64),
        )


_NUMPY = {
    "interp_weights": _interp_weights_np,
    "minplus_l1": _minplus_l1_np,
    "hjb_terms": _hjb_terms_np,
    "augmented_step": _augmented_step_np,
}
_NUMBA = (
    {
        "interp_weights": _interp_weights_nb,
        "minplus_l1": _minplus_l1_nb,
        "hjb_terms": _hjb_terms_nb,
        "augmented_step": _augmented_step_nb,
    }
    if HAVE_NUMBA
    else None
)

_active = _NUMBA if HAVE_NUMBA else _NUMPY


def backend():
    """Name of the active kernel backend (``"numba"`` or ``"numpy"``)."""
    return "numba" if _active is _NUMBA else "numpy"


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global _active
    previous = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend unavailable")
        _active = _NUMBA
    elif name == "numpy":
        _active = _NUMPY
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def set_threads(k):
    """Forward a thread count to numba when it is active; no-op otherwise."""
    if HAVE_NUMBA and k:
        numba.set_num_threads(max(1, min(int(k), numba.config.NUMBA_NUM_THREADS)))


def interp_weights(xp, x, tol=0.0):
    return _active["interp_weights"](xp, x, tol)


def minplus_l1(phi_vals, q, y, n):
    return _active["minplus_l1"](phi_vals, q, y, n)


def hjb_terms(v, dx, diff, drift):
    return _active["hjb_terms"](v, dx, diff, drift)


def augmented_step(w_next, j, wx, a_new, a_grid, weights):
    return _active["augmented_step"](w_next, j, wx, a_new, a_grid, weights)


def gather(values, j, w):
    """Evaluate the linear interpolant defined by ``interp_weights`` output."""
    hi = np.minimum(j + 1, values.shape[0] - 1)
    return (1.0 - w) * values[j] + w * values[hi]
