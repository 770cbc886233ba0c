import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bmae import _kernels_py as py
from bmae import kernels

try:
    from bmae import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_python_switch():
    out = subprocess.run([sys.executable, "-c", "from bmae import kernels; print(kernels.BACKEND)"],
                         env={**os.environ, "BMAE_PURE_PYTHON": "1"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unit_rows_zero_and_scale():
    y, n = py.unit_rows(np.array([[0.0, 0.0], [3.0, 4.0], [1e-200, 0.0], [1e200, 1e200]]))
    np.testing.assert_array_equal(y[0], [0.0, 0.0])
    np.testing.assert_allclose(y[1], [0.6, 0.8])
    np.testing.assert_array_equal(y[2], [1.0, 0.0])
    np.testing.assert_allclose(y[3], [2**-0.5, 2**-0.5])
    np.testing.assert_allclose(n[:, 0], [0.0, 5.0, 1e-200, 2**0.5 * 1e200])


def cosine_field(x, p):
    xn, _ = py.unit_rows(x)
    pn, _ = py.unit_rows(p)
    return xn @ pn.T


@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_pool_fallback_matches_definition(B, N, D, K, seed):
    r = np.random.default_rng(seed)
    x, p = r.standard_normal((B, N, D)), r.standard_normal((K, D))
    smax, idx, smean = py.max_cosine_pool(x, p)
    f = cosine_field(x, p)
    np.testing.assert_array_equal(smax, f.max(axis=1))
    np.testing.assert_array_equal(idx, f.argmax(axis=1))
    np.testing.assert_allclose(smean, f.mean(axis=1), atol=1e-15)


@needs_ext
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_pool_extension_matches_fallback(B, N, D, K, seed):
    r = np.random.default_rng(seed)
    x, p = r.standard_normal((B, N, D)), r.standard_normal((K, D))
    x[0, 0] = 0.0  # a zero patch
    a, b = py.max_cosine_pool(x, p), cy.max_cosine_pool(x, p)
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[2], b[2], atol=1e-14)
    # argmax may only differ where the two maxima are within rounding of each other
    f = cosine_field(x, p)
    picked = np.take_along_axis(f, b[1][:, None, :], axis=1)[:, 0, :]
    np.testing.assert_allclose(picked, a[0], atol=1e-14)


@needs_ext
def test_pool_extension_ties_go_low():
    x = np.ones((1, 4, 3))
    smax, idx, _ = cy.max_cosine_pool(x, np.ones((2, 3)))
    np.testing.assert_array_equal(idx, [[0, 0]])


@needs_ext
def test_pool_extension_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        cy.max_cosine_pool(np.ones((1, 2, 3)), np.ones((1, 4)))


@pytest.mark.parametrize("mod", [py, pytest.param(cy, marks=needs_ext)], ids=["python", "cython"])
def test_pool_empty_shapes(mod):
    with pytest.raises(ValueError):
        mod.max_cosine_pool(np.ones((2, 0, 3)), np.ones((4, 3)))
    assert [a.shape for a in mod.max_cosine_pool(np.ones((0, 2, 3)), np.ones((4, 3)))] == [(0, 4)] * 3
    assert [a.shape for a in mod.max_cosine_pool(np.ones((2, 2, 3)), np.ones((0, 3)))] == [(2, 0)] * 3


@given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_argmax_mid_and_scatter(P, N, Q, seed):
    x = np.random.default_rng(seed).integers(0, 3, (P, N, Q)).astype(float)
    impls = [py] + ([cy] if cy is not None else [])
    for m in impls:
        v, i = m.argmax_mid(x)
        np.testing.assert_array_equal(v, x.max(axis=1))
        np.testing.assert_array_equal(i, x.argmax(axis=1))
        g = np.arange(P * Q, dtype=float).reshape(P, Q) + 1
        s = m.scatter_mid(i, g, N)
        assert s.shape == (P, N, Q)
        np.testing.assert_array_equal(s.sum(axis=1), g)
        np.testing.assert_array_equal(np.take_along_axis(s, i[:, None, :], axis=1)[:, 0, :], g)


def trim_oracle(counts, cap, floor, drop_order):
    # Straight-line restatement: shave one event at a time from the fullest
    # recording above the floor (lowest index on ties), then drop recordings.
    c = list(counts)
    while sum(c) > cap:
        above = [i for i in range(len(c)) if c[i] > floor]
        if not above:
            break
        top = max(c[i] for i in above)
        c[min(i for i in above if c[i] == top)] -= 1
    for i in drop_order:
        if sum(c) <= cap:
            break
        c[i] = 0
    return c


@st.composite
def trim_case(draw):
    n = draw(st.integers(1, 12))
    counts = draw(st.lists(st.integers(1, 6), min_size=n, max_size=n))
    floor = draw(st.integers(1, 3))
    counts = [max(c, floor) for c in counts]
    cap = draw(st.integers(0, sum(counts) + 2))
    order = draw(st.permutations(list(range(n))))
    return counts, cap, floor, order


@given(trim_case())
def test_trim_matches_oracle(case):
    counts, cap, floor, order = case
    expected = trim_oracle(counts, cap, floor, order)
    args = (np.array(counts, dtype=np.int64), cap, floor, np.array(order, dtype=np.int64))
    assert py.trim_counts(*args).tolist() == expected
    if cy is not None:
        assert cy.trim_counts(*args).tolist() == expected
