"""Compiled and pure-Python kernels must agree; where op order matches they agree bit-for-bit."""
import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flowinv import kernels

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
unit = st.floats(0.0, 1.0, allow_nan=False)


def test_backend_reported():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


def test_pure_env_forces_fallback():
    code = "import flowinv.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, FLOWINV_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_both
@given(arrays(np.float64, (3, 5, 6), elements=finite), st.booleans())
def test_channel_mean_parity(v, signed):
    py, c = BACKENDS["python"], BACKENDS["cython"]
    assert py.channel_mean(v, signed).tobytes() == c.channel_mean(v, signed).tobytes()


@needs_both
@given(arrays(np.float64, (4, 7), elements=finite))
def test_minmax_parity(m):
    py, c = BACKENDS["python"], BACKENDS["cython"]
    assert py.minmax_normalize(m, 1e-12).tobytes() == c.minmax_normalize(m, 1e-12).tobytes()


@needs_both
@given(arrays(np.float64, (3, 4, 4), elements=finite), arrays(np.float64, (3, 4, 4), elements=finite),
       arrays(np.float64, (3, 4, 4), elements=finite), arrays(np.float64, (4, 4), elements=unit),
       st.floats(0, 10), st.floats(-0.5, 0.0))
def test_edit_update_parity(z, vs, vt, m, omega, dt):
    py, c = BACKENDS["python"], BACKENDS["cython"]
    assert py.edit_update(z, vs, vt, m, omega, dt).tobytes() == c.edit_update(z, vs, vt, m, omega, dt).tobytes()


@needs_both
@given(arrays(np.float64, (2, 3, 3), elements=finite), st.floats(0.0, 1.0),
       st.lists(st.floats(-2, 2), min_size=2, max_size=2), st.floats(0.1, 3.0))
def test_analytic_velocity_parity(z, t, mu, sigma):
    py, c = BACKENDS["python"], BACKENDS["cython"]
    mu = np.array(mu)
    assert py.analytic_velocity(z, t, mu, sigma).tobytes() == c.analytic_velocity(z, t, mu, sigma).tobytes()


@needs_both
@given(arrays(np.float64, (12, 16), elements=unit), arrays(np.float64, (12, 16), elements=unit))
def test_ssim_parity(a, b):
    py, c = BACKENDS["python"], BACKENDS["cython"]
    # window sums are reduced in different orders, so agreement is to rounding
    assert py.ssim_channel(a, b, 8, 4, 1e-4, 9e-4) == pytest.approx(c.ssim_channel(a, b, 8, 4, 1e-4, 9e-4),
                                                                    rel=1e-12, abs=1e-12)


def test_wrappers_validate_shapes():
    with pytest.raises(ValueError):
        kernels.channel_mean(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        kernels.edit_update(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), np.zeros((4, 4)), 1.0, -0.1)
    with pytest.raises(ValueError):
        kernels.edit_update(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((4, 5)), 1.0, -0.1)


def test_edit_update_matches_written_out_step(rng):
    z, vs, vt = rng.standard_normal((3, 3, 5, 5))
    m = rng.random((5, 5))
    omega, dt = 5.0, -1.0 / 15
    want = z + omega * dt * (1 + m) * (vt - vs) + dt * (m * vt + (1 - m) * vs)
    np.testing.assert_allclose(kernels.edit_update(z, vs, vt, m, omega, dt), want, rtol=1e-13, atol=1e-14)


def test_reload_keeps_backend():
    mod = importlib.reload(kernels)
    assert mod.BACKEND in mod.backends()
