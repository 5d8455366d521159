"""numba and numpy kernel backends must agree elementwise."""

import subprocess
import sys

import numpy as np
import pytest

from evseg.kernels import numba_impl as nb, numpy_impl as npk
import evseg.kernels as kernels


def _conv_case(rng, trial):
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    c_in, c_out = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    h_out, w_out = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    hp, wp = (h_out - 1) * stride + k, (w_out - 1) * stride + k
    dt = np.float32 if trial % 2 else np.float64
    xp = rng.standard_normal((c_in, hp, wp)).astype(dt)
    w = rng.standard_normal((c_out, c_in, k, k)).astype(dt)
    b = rng.standard_normal(c_out).astype(dt)
    dy = rng.standard_normal((c_out, h_out, w_out)).astype(dt)
    return xp, w, b, dy, stride, k, hp, wp


@pytest.mark.parametrize("trial", range(12))
def test_conv_forward_parity(rng, trial):
    rng = np.random.default_rng(100 + trial)
    xp, w, b, dy, stride, k, hp, wp = _conv_case(rng, trial)
    y0 = npk.conv2d_forward(xp, w, b, stride)
    y1 = nb.conv2d_forward(xp, w, b, stride)
    assert y0.shape == y1.shape and y0.dtype == y1.dtype
    rtol = 1e-4 if y0.dtype == np.float32 else 1e-10
    np.testing.assert_allclose(y1, y0, rtol=rtol, atol=rtol)


@pytest.mark.parametrize("trial", range(12))
def test_conv_backward_parity(rng, trial):
    rng = np.random.default_rng(300 + trial)
    xp, w, b, dy, stride, k, hp, wp = _conv_case(rng, trial)
    rtol = 1e-4 if dy.dtype == np.float32 else 1e-10
    dx0 = npk.conv2d_backward_input(dy, w, stride, hp, wp)
    dx1 = nb.conv2d_backward_input(dy, w, stride, hp, wp)
    np.testing.assert_allclose(dx1, dx0, rtol=rtol, atol=rtol)
    dw0, db0 = npk.conv2d_backward_params(dy, xp, stride, k)
    dw1, db1 = nb.conv2d_backward_params(dy, xp, stride, k)
    np.testing.assert_allclose(dw1, dw0, rtol=rtol, atol=rtol)
    np.testing.assert_allclose(db1, db0, rtol=rtol, atol=rtol)


def test_conv_backward_input_is_forward_transpose(rng):
    # <y, dy> adjoint identity: sum(dy * conv(x)) == sum(x * conv_backward(dy))
    for stride in (1, 2):
        xp = rng.standard_normal((3, 11, 9))
        w = rng.standard_normal((4, 3, 3, 3))
        y = npk.conv2d_forward(xp, w, np.zeros(4), stride)
        dy = rng.standard_normal(y.shape)
        dx = kernels.conv2d_backward_input(dy, w, stride, 11, 9)
        assert float((y * dy).sum()) == pytest.approx(
            float((npk.conv2d_forward(xp, w, np.zeros(4), stride) * dy).sum()))
        assert float((xp * dx).sum()) == pytest.approx(
            float((y * dy).sum()), rel=1e-10)


@pytest.mark.parametrize("n", [0, 1, 57, 2000])
def test_voxel_accumulate_parity(n):
    rng = np.random.default_rng(n)
    xs = rng.integers(0, 12, n)
    ys = rng.integers(0, 9, n)
    tnorm = rng.uniform(0, 4.0, n)
    ps = rng.choice(np.array([-1.0, 1.0]), n)
    g0 = npk.voxel_accumulate(xs, ys, tnorm, ps, 5, 9, 12)
    g1 = nb.voxel_accumulate(xs, ys, tnorm, ps, 5, 9, 12)
    np.testing.assert_allclose(g1, g0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_event_automaton_parity(seed):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((6, 7, 8)).cumsum(axis=0) * 0.3
    ts = np.arange(7, dtype=np.int64) * 1000
    theta = 0.25
    a = npk.event_automaton(frames, ts[:6], theta)
    b = nb.event_automaton(frames, ts[:6], theta)
    for c0, c1 in zip(a, b):
        assert np.array_equal(c0, c1)


def test_backend_env_selects_numpy():
    code = ("import os; os.environ['EVSEG_BACKEND']='numpy'; "
            "import evseg.kernels as k; print(k.backend_name())")
    out = subprocess.run([sys.executable, "-c", code],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_backend_env_rejects_unknown():
    code = ("import os; os.environ['EVSEG_BACKEND']='cuda'; "
            "import evseg.kernels")
    out = subprocess.run([sys.executable, "-c", code],
                         capture_output=True, text=True)
    assert out.returncode != 0 and "EVSEG_BACKEND" in out.stderr
