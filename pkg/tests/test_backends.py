"""The jit kernels and the numpy fallback must agree: gather kernels bit for
bit, scatter kernels up to summation order, recurrences to float rounding."""

import os
import subprocess
import sys

import numpy as np
import pytest

pytest.importorskip("numba")

from lipsynth.engine import backend
from lipsynth.engine import kernels_numba as KJ
from lipsynth.engine import kernels_numpy as KN

RNG = np.random.default_rng(99)


def r(*shape, dtype=np.float32):
    return RNG.standard_normal(shape).astype(dtype)


# ---- gather kernels: bit-exact -----------------------------------------------------


@pytest.mark.parametrize("k,stride,pad,dil", [(5, 2, 2, 1), (3, 1, 0, 2), (7, 3, 4, 1)])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col1d_exact(k, stride, pad, dil, dtype):
    x = r(2, 3, 41, dtype=dtype)
    a = KN.im2col1d(x, k, stride, pad, dil)
    b = KJ.im2col1d(x, k, stride, pad, dil)
    assert a.dtype == b.dtype == dtype
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kh,kw,sh,sw,ph,pw", [(3, 3, 1, 1, 1, 1), (4, 2, 2, 2, 0, 1)])
def test_im2col2d_exact(kh, kw, sh, sw, ph, pw):
    x = r(2, 4, 11, 13)
    a = KN.im2col2d(x, kh, kw, sh, sw, ph, pw)
    b = KJ.im2col2d(x, kh, kw, sh, sw, ph, pw)
    assert np.array_equal(a, b)


def test_im2col3d_exact():
    x = r(1, 2, 7, 10, 10)
    a = KN.im2col3d(x, 3, 5, 5, 1, 2, 2, 1, 2, 2)
    b = KJ.im2col3d(x, 3, 5, 5, 1, 2, 2, 1, 2, 2)
    assert np.array_equal(a, b)


# ---- scatter kernels: same result up to summation order ----------------------------


@pytest.mark.parametrize("k,stride,pad,dil", [(5, 2, 2, 1), (3, 1, 0, 2)])
def test_col2im1d_matches(k, stride, pad, dil):
    cols = r(2, 3, *KN.im2col1d(np.zeros((2, 3, 41), np.float32), k, stride, pad, dil).shape[2:])
    a = KN.col2im1d(cols, 41, stride, pad, dil)
    b = KJ.col2im1d(cols, 41, stride, pad, dil)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_col2im2d_matches():
    cols = r(2, 4, 3, 3, 11, 13)
    a = KN.col2im2d(cols, 11, 13, 1, 1, 1, 1)
    b = KJ.col2im2d(cols, 11, 13, 1, 1, 1, 1)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_col2im3d_matches():
    x = np.zeros((1, 2, 7, 10, 10), np.float32)
    cols = r(*KN.im2col3d(x, 3, 5, 5, 1, 2, 2, 1, 2, 2).shape)
    a = KN.col2im3d(cols, 7, 10, 10, 1, 2, 2, 1, 2, 2)
    b = KJ.col2im3d(cols, 7, 10, 10, 1, 2, 2, 1, 2, 2)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_overlap_add_matches():
    frames = r(3, 9, 32)
    a = KN.overlap_add(frames, 8, 100)
    b = KJ.overlap_add(frames, 8, 100)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)


# ---- pooling: same values and the same argmax tie-breaking -------------------------


@pytest.mark.parametrize("kh,kw,sh,sw,ph,pw", [(3, 3, 2, 2, 1, 1), (2, 2, 2, 2, 0, 0)])
def test_maxpool_fwd_exact(kh, kw, sh, sw, ph, pw):
    x = r(4, 10, 12)
    (ya, ia), (yb, ib) = (
        KN.maxpool2d_fwd(x, kh, kw, sh, sw, ph, pw),
        KJ.maxpool2d_fwd(x, kh, kw, sh, sw, ph, pw),
    )
    assert np.array_equal(ya, yb)
    assert np.array_equal(ia, ib)
    assert ia.dtype == ib.dtype == np.int64


def test_maxpool_fwd_ties_pick_first():
    # all-equal input: every window has kh*kw tied maxima
    x = np.zeros((2, 8, 8), np.float32)
    (_, ia), (_, ib) = KN.maxpool2d_fwd(x, 3, 3, 2, 2, 1, 1), KJ.maxpool2d_fwd(x, 3, 3, 2, 2, 1, 1)
    assert np.array_equal(ia, ib)


def test_maxpool_bwd_matches():
    x = r(4, 10, 12)
    _, idx = KN.maxpool2d_fwd(x, 3, 3, 2, 2, 1, 1)
    dy = r(*idx.shape)
    a = KN.maxpool2d_bwd(dy, idx, 10, 12)
    b = KJ.maxpool2d_bwd(dy, idx, 10, 12)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)


# ---- recurrences: float rounding only ----------------------------------------------


def test_lstm_fwd_matches():
    xg = r(3, 25, 64) * 0.5
    w_hh = r(64, 16) * 0.3
    ha, ca, ga = KN.lstm_fwd(xg, w_hh)
    hb, cb, gb = KJ.lstm_fwd(xg, w_hh)
    np.testing.assert_allclose(ha, hb, rtol=3e-5, atol=1e-6)
    np.testing.assert_allclose(ca, cb, rtol=3e-5, atol=1e-6)
    np.testing.assert_allclose(ga, gb, rtol=3e-5, atol=1e-6)


def test_lstm_bwd_matches():
    xg = r(3, 25, 64) * 0.5
    w_hh = r(64, 16) * 0.3
    h, c, g = KN.lstm_fwd(xg, w_hh)
    dh = r(*h.shape)
    a = KN.lstm_bwd(w_hh, g, c, dh)
    b = KJ.lstm_bwd(w_hh, g, c, dh)
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)


# ---- backend selection ----------------------------------------------------------


def _probe(env_value):
    env = dict(os.environ)
    env.pop("LIPSYNTH_BACKEND", None)
    if env_value is not None:
        env["LIPSYNTH_BACKEND"] = env_value
    return subprocess.run(
        [sys.executable, "-c", "from lipsynth.engine.backend import backend_name; print(backend_name())"],
        capture_output=True,
        text=True,
        env=env,
    )


def test_backend_name_consistent():
    assert backend.backend_name() in ("numba", "numpy")
    assert backend.backend_name() == backend.name


@pytest.mark.parametrize("flag,expect", [("numpy", "numpy"), ("numba", "numba"), (None, "numba")])
def test_backend_env_flag(flag, expect):
    out = _probe(flag)
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == expect


def test_backend_invalid_flag_rejected():
    out = _probe("cuda")
    assert out.returncode != 0
    assert "LIPSYNTH_BACKEND" in out.stderr


def test_model_forward_agrees_across_backends(tmp_path):
    # same seeded forward/backward under each backend, compared to rounding
    script = tmp_path / "probe.py"
    script.write_text(
        "import sys\n"
        "import numpy as np\n"
        "from lipsynth.engine import LSTM, Conv1d, Tensor\n"
        "r = np.random.default_rng(7)\n"
        "conv = Conv1d(3, 8, 5, r, stride=2, padding=2)\n"
        "lstm = LSTM(8, 4, r)\n"
        "x = Tensor(np.random.default_rng(11).standard_normal((2, 3, 40)).astype(np.float32), requires_grad=True)\n"
        "y = lstm(conv(x).transpose(0, 2, 1))\n"
        "y.sum().backward()\n"
        "np.savez(sys.argv[1], y=y.data, dx=x.grad)\n"
    )
    outs = {}
    for flag in ("numpy", "numba"):
        env = dict(os.environ, LIPSYNTH_BACKEND=flag)
        path = tmp_path / f"{flag}.npz"
        run = subprocess.run(
            [sys.executable, str(script), str(path)], capture_output=True, text=True, env=env
        )
        assert run.returncode == 0, run.stderr
        outs[flag] = np.load(path)
    np.testing.assert_allclose(outs["numpy"]["y"], outs["numba"]["y"], rtol=3e-5, atol=1e-6)
    np.testing.assert_allclose(outs["numpy"]["dx"], outs["numba"]["dx"], rtol=1e-4, atol=1e-5)
