import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gbsde_lab import _kernels

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _both(name, *args):
    prev = _kernels.set_backend("numpy")
    try:
        a = getattr(_kernels, name)(*args)
        _kernels.set_backend("numba")
        b = getattr(_kernels, name)(*args)
    finally:
        _kernels.set_backend(prev)
    return a, b


@needs_numba
@settings(max_examples=60, deadline=None)
@given(xp=arrays(np.float64, st.integers(1, 30), elements=finite, unique=True),
       x=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=finite),
       tol=st.sampled_from([0.0, 1e-12, 1e-3]))
def test_interp_weights_backends_agree(xp, x, tol):
    xp = np.sort(xp)
    (j0, w0, c0), (j1, w1, c1) = _both("interp_weights", xp, x, tol)
    assert np.array_equal(j0, j1)
    assert np.allclose(w0, w1, rtol=0, atol=1e-14)
    assert c0 == c1


@settings(max_examples=60, deadline=None)
@given(xp=arrays(np.float64, st.integers(2, 30), elements=finite, unique=True),
       x=arrays(np.float64, st.integers(1, 20), elements=st.floats(-40, 40)))
def test_interp_weights_reproduce_linear_functions(xp, x):
    xp = np.sort(xp)
    j, w, _ = _kernels.interp_weights(xp, x)
    f = 3.0 * xp - 1.0
    got = _kernels.gather(f, j, w)
    inside = (x >= xp[0]) & (x <= xp[-1])
    assert np.allclose(got[inside], 3.0 * x[inside] - 1.0, atol=1e-9 * (1 + np.abs(x[inside])).max(initial=1))
    assert np.all((w >= 0) & (w <= 1))


@needs_numba
@settings(max_examples=40, deadline=None)
@given(data=st.data(), m=st.integers(1, 8), p=st.integers(2, 40), n=st.floats(0.1, 20))
def test_minplus_backends_agree(data, m, p, n):
    phi = data.draw(arrays(np.float64, (m, p), elements=finite))
    q = np.linspace(-3, 3, p)
    y = data.draw(arrays(np.float64, m, elements=st.floats(-3, 3)))
    (v0, k0), (v1, k1) = _both("minplus_l1", phi, q, y, n)
    assert np.allclose(v0, v1, rtol=0, atol=1e-12)
    assert np.array_equal(k0, k1)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(data=st.data(), m=st.integers(3, 40), k=st.integers(1, 5))
def test_hjb_terms_backends_agree(data, m, k):
    v = data.draw(arrays(np.float64, m, elements=finite))
    diff = data.draw(arrays(np.float64, (m - 2, k), elements=st.floats(0, 5)))
    drift = data.draw(arrays(np.float64, (m - 2, k), elements=st.floats(-5, 5)))
    a, b = _both("hjb_terms", v, 0.1, diff, drift)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9)


def test_hjb_terms_exact_on_quadratics():
    x = np.linspace(-1, 1, 11)
    v = x ** 2
    out = _kernels.hjb_terms(v, x[1] - x[0], np.full((9, 1), 0.5), np.zeros((9, 1)))
    assert np.allclose(out, 1.0)


@needs_numba
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), m0=st.integers(1, 6), s=st.integers(1, 3), a=st.integers(2, 9))
def test_augmented_step_backends_agree(seed, m0, s, a):
    rng = np.random.default_rng(seed)
    m1 = m0 + 3
    w_next = rng.normal(size=(m1, a))
    j = rng.integers(0, m1 - 1, size=(m0, s, 3))
    wx = rng.uniform(size=(m0, s, 3))
    a_grid = np.linspace(-1, 1, a)
    a_new = rng.uniform(-1.5, 1.5, size=(m0, s, a))
    args = (w_next, j, wx, a_new, a_grid, np.array([1, 4, 1]) / 6)
    r0, r1 = _both("augmented_step", *args)
    assert np.allclose(r0, r1, rtol=0, atol=1e-12)


def test_set_backend_rejects_unknown_name():
    with pytest.raises(ValueError):
        _kernels.set_backend("fortran")


def test_disable_flag_selects_numpy():
    code = "from gbsde_lab import _kernels; print(_kernels.backend(), _kernels.HAVE_NUMBA)"
    env = dict(os.environ, GBSDE_LAB_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False"]


@needs_numba
def test_solver_results_identical_across_backends():
    from gbsde_lab.bsde import BsdeProblem, solve_backward
    from gbsde_lab.generators import linear
    from gbsde_lab.sublinear import VolatilityBounds, build_lattice

    lat = build_lattice(1.0, 40, VolatilityBounds(0.5, 1.0), 3, max_nodes=300)
    prob = BsdeProblem(lat, lat.node_function(np.abs), linear(-1.0, 0.3))
    prev = _kernels.set_backend("numpy")
    try:
        a = solve_backward(prob)
        _kernels.set_backend("numba")
        b = solve_backward(prob)
    finally:
        _kernels.set_backend(prev)
    assert max(float(np.max(np.abs(x.values - y.values))) for x, y in zip(a.Y, b.Y)) < 1e-11
