"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path; ``evseg.kernels.numba_impl`` provides the
jitted versions with identical semantics. Keep the two in lockstep --
``tests/test_kernels.py`` asserts elementwise agreement.
"""

import numpy as np

BACKEND = "numpy"


def voxel_accumulate(xs, ys, tnorm, ps, num_bins, height, width, dtype=np.float64):
    """Scatter events into a (B, H, W) grid with linear temporal weights.

    ``tnorm`` is the normalized bin coordinate in [0, B-1]; each event
    deposits p * (1 - |b - t*|) into the two neighbouring bins.
    """
    grid = np.zeros(num_bins * height * width, dtype=dtype)
    if len(xs) == 0:
        return grid.reshape(num_bins, height, width)
    b0 = np.floor(tnorm).astype(np.int64)
    np.clip(b0, 0, num_bins - 1, out=b0)
    frac = tnorm - b0
    flat = ys.astype(np.int64) * width + xs.astype(np.int64)
    w0 = ps * (1.0 - frac)
    np.add.at(grid, b0 * height * width + flat, w0.astype(dtype))
    hi = b0 + 1
    ok = hi < num_bins
    np.add.at(grid, hi[ok] * height * width + flat[ok], (ps[ok] * frac[ok]).astype(dtype))
    return grid.reshape(num_bins, height, width)


def event_automaton(log_frames, frame_ts, theta):
    """Per-pixel threshold-crossing automaton over a log-intensity frame stack.

    Returns (xs, ys, ts, ps) ordered by pixel (row-major) then time; the
    caller is responsible for the final global time sort.
    """
    n_frames, height, width = log_frames.shape
    ref = log_frames[0].copy()
    xs_all, ys_all, ts_all, ps_all = [], [], [], []
    # Vectorised over pixels, frame by frame; residual carries through `ref`.
    per_pixel = [[] for _ in range(height * width)]
    for k in range(1, n_frames):
        cur = log_frames[k]
        delta = cur - ref
        n = np.floor(np.abs(delta) / theta + 1e-9).astype(np.int64)
        fire = n > 0
        if np.any(fire):
            sign = np.sign(delta[fire])
            counts = n[fire]
            t0 = frame_ts[k - 1]
            dt = frame_ts[k] - t0
            mag = np.abs(delta[fire])
            idx = np.flatnonzero(fire.ravel())
            for j, flat in enumerate(idx):
                c = counts[j]
                steps = np.arange(1, c + 1, dtype=np.float64)
                t_ev = t0 + np.floor(dt * (steps * theta) / mag[j]).astype(np.int64)
                per_pixel[flat].append((t_ev, np.full(c, sign[j], dtype=np.int64)))
            ref_flat = ref.ravel()
            ref_flat[idx] += sign * counts * theta
    for flat in range(height * width):
        for t_ev, p_ev in per_pixel[flat]:
            k = len(t_ev)
            xs_all.append(np.full(k, flat % width, dtype=np.int64))
            ys_all.append(np.full(k, flat // width, dtype=np.int64))
            ts_all.append(t_ev)
            ps_all.append(p_ev)
    if not ts_all:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), e.copy(), e.copy()
    return (np.concatenate(xs_all), np.concatenate(ys_all),
            np.concatenate(ts_all), np.concatenate(ps_all))


def _im2col(xp, k, stride, h_out, w_out):
    c_in = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]          # (Ci, Ho, Wo, K, K)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h_out * w_out)
    return np.ascontiguousarray(cols)


def conv2d_forward(xp, w, b, stride):
    """2-D convolution on a pre-padded input. xp: (Ci, Hp, Wp), w: (Co, Ci, K, K)."""
    c_out, c_in, k, _ = w.shape
    hp, wp = xp.shape[1], xp.shape[2]
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    cols = _im2col(xp, k, stride, h_out, w_out)
    y = w.reshape(c_out, -1) @ cols + b[:, None]
    return y.reshape(c_out, h_out, w_out)


def conv2d_backward_input(dy, w, stride, hp, wp):
    """Gradient w.r.t. the pre-padded input (caller crops the padding)."""
    c_out, c_in, k, _ = w.shape
    h_out, w_out = dy.shape[1], dy.shape[2]
    dcols = w.reshape(c_out, -1).T @ dy.reshape(c_out, -1)
    dcols = dcols.reshape(c_in, k, k, h_out, w_out)
    dxp = np.zeros((c_in, hp, wp), dtype=dy.dtype)
    for kh in range(k):
        for kw in range(k):
            dxp[:, kh:kh + h_out * stride:stride,
                kw:kw + w_out * stride:stride] += dcols[:, kh, kw]
    return dxp


def conv2d_backward_params(dy, xp, stride, k):
    c_out = dy.shape[0]
    h_out, w_out = dy.shape[1], dy.shape[2]
    c_in = xp.shape[0]
    cols = _im2col(xp, k, stride, h_out, w_out)
    dw = (dy.reshape(c_out, -1) @ cols.T).reshape(c_out, c_in, k, k)
    db = dy.sum(axis=(1, 2))
    return dw, db
