import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clbench import kernels

needs_numba = pytest.mark.skipif(kernels.im2col_nb is None, reason="numba path disabled")

conv_cases = st.tuples(
    st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),  # n c h w
    st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(0, 10_000),  # k stride pad seed
)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(conv_cases)
def test_im2col_paths_agree(case):
    n, c, h, w, k, s, p, seed = case
    x = np.random.default_rng(seed).normal(size=(n, c, h, w))
    np.testing.assert_array_equal(kernels.im2col_np(x, k, k, s, p), kernels.im2col_nb(x, k, k, s, p))


@needs_numba
@settings(max_examples=40, deadline=None)
@given(conv_cases)
def test_col2im_paths_agree(case):
    n, c, h, w, k, s, p, seed = case
    oh, ow = kernels.conv_out_size(h, k, s, p), kernels.conv_out_size(w, k, s, p)
    cols = np.random.default_rng(seed).normal(size=(n * oh * ow, c * k * k))
    np.testing.assert_allclose(kernels.col2im_np(cols, (n, c, h, w), k, k, s, p),
                               kernels.col2im_nb(cols, (n, c, h, w), k, k, s, p), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(conv_cases)
def test_col2im_is_adjoint(case):
    """<im2col(x), y> == <x, col2im(y)> for both paths."""
    n, c, h, w, k, s, p, seed = case
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    cols = kernels.im2col(x, k, k, s, p)
    y = rng.normal(size=cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * kernels.col2im(y, x.shape, k, k, s, p)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000), st.data())
def test_herding_paths_agree(n, d, seed, data):
    f = np.random.default_rng(seed).normal(size=(n, d))
    m = data.draw(st.integers(1, n))
    np.testing.assert_array_equal(kernels.herding_order_np(f, m), kernels.herding_order_nb(f, m))


def test_herding_ties_go_low():
    f = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    assert list(kernels.herding_order(f, 4)) == [0, 1, 2, 3]


def test_env_flag_selects_numpy_path():
    code = "from clbench import kernels; print(kernels.USE_NUMBA, kernels.im2col is kernels.im2col_np)"
    env = dict(os.environ, CLBENCH_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


def test_dtype_flag():
    code = "from clbench._config import DTYPE; print(DTYPE)"
    env = dict(os.environ, CLBENCH_DTYPE="float64")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "float64"
    env["CLBENCH_DTYPE"] = "float16"
    bad = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert bad.returncode != 0 and "CLBENCH_DTYPE" in bad.stderr
