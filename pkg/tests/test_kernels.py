import os
import subprocess
import sys

import numpy as np
import pytest

from ccsq import _lstm_py, kernels

cython = pytest.importorskip("ccsq._lstm_core")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_forward(zin, wh):
    """Textbook LSTM step written independently of both backends."""
    T = zin.shape[0]
    H = wh.shape[1]
    h, c = np.zeros(H), np.zeros(H)
    hs = []
    for t in range(T):
        z = zin[t] + wh @ h
        i, f, g, o = _sigmoid(z[:H]), _sigmoid(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), _sigmoid(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
    return np.array(hs)


@pytest.mark.parametrize("T,H", [(1, 1), (5, 3), (40, 16), (7, 100)])
def test_backends_agree(T, H):
    rng = np.random.default_rng(T * 1000 + H)
    zin = rng.normal(0, 1.5, (T, 4 * H))
    wh = rng.normal(0, 0.5, (4 * H, H))
    dh = rng.normal(size=(T, H))
    a_py, c_py, h_py = _lstm_py.lstm_forward(zin, wh)
    a_cy, c_cy, h_cy = cython.lstm_forward(zin, wh)
    for p, q in ((a_py, a_cy), (c_py, c_cy), (h_py, h_cy)):
        np.testing.assert_allclose(q, p, rtol=0, atol=1e-12)
    np.testing.assert_allclose(h_py, reference_forward(zin, wh), rtol=0, atol=1e-12)
    dz_py, dwh_py = _lstm_py.lstm_backward(a_py, c_py, h_py, wh, dh)
    dz_cy, dwh_cy = cython.lstm_backward(a_cy, c_cy, h_cy, wh, dh)
    np.testing.assert_allclose(dz_cy, dz_py, rtol=0, atol=1e-12)
    np.testing.assert_allclose(dwh_cy, dwh_py, rtol=0, atol=1e-12)


def test_backward_against_finite_differences_of_reference():
    rng = np.random.default_rng(0)
    T, H = 4, 2
    zin = rng.normal(size=(T, 4 * H))
    wh = rng.normal(0, 0.7, (4 * H, H))
    dh = rng.normal(size=(T, H))

    def f(z, w):
        return float(np.sum(reference_forward(z, w) * dh))

    acts, c, h = _lstm_py.lstm_forward(zin, wh)
    dz, dwh = _lstm_py.lstm_backward(acts, c, h, wh, dh)
    eps = 1e-6
    for idx in np.ndindex(zin.shape):
        zp, zm = zin.copy(), zin.copy()
        zp[idx] += eps
        zm[idx] -= eps
        assert dz[idx] == pytest.approx((f(zp, wh) - f(zm, wh)) / (2 * eps), abs=1e-8)
    for idx in np.ndindex(wh.shape):
        wp, wm = wh.copy(), wh.copy()
        wp[idx] += eps
        wm[idx] -= eps
        assert dwh[idx] == pytest.approx((f(zin, wp) - f(zin, wm)) / (2 * eps), abs=1e-8)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        _lstm_py.lstm_forward(np.zeros((3, 8)), np.zeros((12, 3)))
    with pytest.raises(ValueError):
        cython.lstm_forward(np.zeros((3, 8)), np.zeros((12, 3)))


def test_backend_selection():
    assert kernels.BACKEND == "cython"
    assert kernels.get_backend("python")[0] is _lstm_py.lstm_forward
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
    env = dict(os.environ, CCSQ_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import ccsq; print(ccsq.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
