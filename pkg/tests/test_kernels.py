import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmae import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def _rows(seed, rows, cols, scale=3.0):
    return np.random.default_rng(seed).normal(scale=scale, size=(rows, cols))


def test_gelu_matches_erf_definition():
    x = np.linspace(-6, 6, 101)[None]
    expect = np.array([[0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x[0]]])
    np.testing.assert_allclose(K.np_gelu_fwd(x), expect, rtol=1e-14, atol=1e-15)


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    x = _rows(0, 5, 7)
    y = K.np_softmax_fwd(x)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(K.np_softmax_fwd(x + 100.0), y, rtol=1e-12)


def test_layer_norm_output_statistics():
    x = _rows(1, 6, 9)
    y, xhat, rstd = K.np_layer_norm_fwd(x, np.ones(9), np.zeros(9), 1e-6)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, rtol=1e-5)


@needs_numba
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(2, 40), st.integers(0, 10_000))
def test_backends_agree(rows, cols, seed):
    x = _rows(seed, rows, cols)
    g = _rows(seed + 1, rows, cols, scale=1.0)
    gamma = _rows(seed + 2, 1, cols)[0]
    beta = _rows(seed + 3, 1, cols)[0]
    for a, b in zip(K.np_layer_norm_fwd(x, gamma, beta, 1e-6), K.nb_layer_norm_fwd(x, gamma, beta, 1e-6)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    _, xhat, rstd = K.np_layer_norm_fwd(x, gamma, beta, 1e-6)
    for a, b in zip(K.np_layer_norm_bwd(g, xhat, rstd, gamma), K.nb_layer_norm_bwd(g, xhat, rstd, gamma)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(K.np_gelu_fwd(x), K.nb_gelu_fwd(x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(K.np_gelu_bwd(x, g), K.nb_gelu_bwd(x, g), rtol=1e-12, atol=1e-14)
    y = K.np_softmax_fwd(x)
    np.testing.assert_allclose(y, K.nb_softmax_fwd(x), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(K.np_softmax_bwd(y, g), K.nb_softmax_bwd(y, g), rtol=1e-10, atol=1e-14)


@needs_numba
def test_backends_agree_in_float32():
    x = _rows(3, 8, 16).astype(np.float32)
    a = K.np_gelu_fwd(x)
    b = K.nb_gelu_fwd(x)
    assert b.dtype == np.float32
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def test_set_backend_switches_and_validates():
    before = K.backend
    try:
        K.set_backend("numpy")
        assert K.backend == "numpy"
        with pytest.raises(ValueError):
            K.set_backend("cuda")
    finally:
        K.set_backend(before)


def test_env_flag_forces_numpy():
    env = dict(os.environ, FMAE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from fmae import _kernels; print(_kernels.backend)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
