"""Learnable maps: recurrent convolutional encoder, upsampling decoder with a
skip connection, and the cross-branch linear projection pair.

Everything is plain numpy arrays with explicit forward caches and hand-written
backward passes; the convolution kernels come from ``evseg.kernels``. The
trunk is deliberately small: three 3x3 conv stages (total stride 4), one
gated recurrent cell at the bottleneck driven by a sequence of voxelized
sub-windows, and a decoder with two 2x upsampling stages.

Parameter dicts map canonical names to arrays; the training loop namespaces
them per branch ("f/...", "b/...", "g/...").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf

from . import kernels

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class NetworkConfig:
    class_count: int = 6
    height: int = 64
    width: int = 64
    in_bins: int = 5           # voxel bins per recurrent sub-window
    feature_dim: int = 32      # bottleneck feature channels D
    stride: int = 4            # total encoder downsampling
    recurrent_steps: int = 2   # number of voxel sub-windows
    hidden1: int = 12          # trunk stage-1 width (also the skip width)
    hidden2: int = 24
    dec1: int = 16
    dec2: int = 12
    seed: int = 0
    dtype: str = "float64"
    input_scale: float = 0.5

    def __post_init__(self):
        if self.stride != 4:
            raise ValueError("trunk is built for total stride 4")
        if self.height % self.stride or self.width % self.stride:
            raise ValueError("height and width must be divisible by the stride")
        if self.feature_dim < self.class_count:
            raise ValueError("feature_dim must be >= class_count")
        if self.recurrent_steps < 1:
            raise ValueError("recurrent_steps must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def feat_h(self):
        return self.height // self.stride

    @property
    def feat_w(self):
        return self.width // self.stride


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def init_params(cfg: NetworkConfig, seed=None) -> dict[str, np.ndarray]:
    """Scaled-normal init (std = 1/sqrt(fan_in)), fixed seed for reproducibility."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.np_dtype
    d = cfg.feature_dim

    def conv(c_out, c_in, k):
        std = 1.0 / np.sqrt(c_in * k * k)
        return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dt)

    params = {
        "conv1_w": conv(cfg.hidden1, cfg.in_bins, 3),
        "conv1_b": np.zeros(cfg.hidden1, dtype=dt),
        "conv2_w": conv(cfg.hidden2, cfg.hidden1, 3),
        "conv2_b": np.zeros(cfg.hidden2, dtype=dt),
        "conv3_w": conv(d, cfg.hidden2, 3),
        "conv3_b": np.zeros(d, dtype=dt),
        "gru_zr_w": conv(2 * d, 2 * d, 1),
        "gru_zr_b": np.zeros(2 * d, dtype=dt),
        "gru_cand_w": conv(d, 2 * d, 3),
        "gru_cand_b": np.zeros(d, dtype=dt),
        "dec1_w": conv(cfg.dec1, d + cfg.hidden1, 3),
        "dec1_b": np.zeros(cfg.dec1, dtype=dt),
        "dec2_w": conv(cfg.dec2, cfg.dec1, 3),
        "dec2_b": np.zeros(cfg.dec2, dtype=dt),
        "head_w": conv(cfg.class_count, cfg.dec2, 1),
        "head_b": np.zeros(cfg.class_count, dtype=dt),
    }
    return params


def init_projection_pair(feature_dim: int, rng=None, dtype="float64",
                         noise=0.01) -> dict[str, np.ndarray]:
    """Channel-wise linear maps, identity + small noise so early distillation
    starts near a no-op."""
    rng = rng or np.random.default_rng(0)
    dt = np.dtype(dtype)
    eye = np.eye(feature_dim, dtype=dt)
    return {
        "f2b_w": eye + rng.normal(0, noise, (feature_dim, feature_dim)).astype(dt),
        "f2b_b": np.zeros(feature_dim, dtype=dt),
        "b2f_w": eye + rng.normal(0, noise, (feature_dim, feature_dim)).astype(dt),
        "b2f_b": np.zeros(feature_dim, dtype=dt),
    }


def project(pair: dict, v: np.ndarray, direction: str) -> np.ndarray:
    """Apply one of the linear maps along the channel axis (vector or map)."""
    if direction not in ("f2b", "b2f"):
        raise ValueError(f"direction must be f2b or b2f, got {direction!r}")
    w, b = pair[f"{direction}_w"], pair[f"{direction}_b"]
    if v.shape[0] != w.shape[1]:
        raise ValueError(f"channel dim {v.shape[0]} does not match projection {w.shape}")
    if v.ndim == 1:
        return w @ v + b
    if v.ndim == 3:
        return np.einsum("od,dhw->ohw", w, v) + b[:, None, None]
    raise ValueError("project expects a (D,) vector or (D, H, W) map")


# -- low-level layers (forward + cache, backward) ---------------------------

def _conv_fwd(x, w, b, stride, pad):
    if pad:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    y = kernels.conv2d_forward(xp, w, b, stride)
    return y, (xp, stride, pad, x.shape)


def _conv_bwd(dy, w, cache, need_dx=True):
    xp, stride, pad, x_shape = cache
    dy = np.ascontiguousarray(dy)
    dw, db = kernels.conv2d_backward_params(dy, xp, stride, w.shape[2])
    if not need_dx:
        return None, dw, db
    dxp = kernels.conv2d_backward_input(dy, w, stride, xp.shape[1], xp.shape[2])
    if pad:
        dx = dxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2]]
    else:
        dx = dxp
    return dx, dw, db


def _up2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up2_bwd(dy):
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# -- encoder -----------------------------------------------------------------

def _trunk_fwd(x, params):
    a1_pre, c1 = _conv_fwd(x, params["conv1_w"], params["conv1_b"], 2, 1)
    a1 = gelu(a1_pre)
    a2_pre, c2 = _conv_fwd(a1, params["conv2_w"], params["conv2_b"], 2, 1)
    a2 = gelu(a2_pre)
    a3_pre, c3 = _conv_fwd(a2, params["conv3_w"], params["conv3_b"], 1, 1)
    a3 = gelu(a3_pre)
    return a3, a1, (c1, a1_pre, c2, a2_pre, c3, a3_pre)


def _trunk_bwd(dout, da1_extra, params, cache, grads):
    c1, a1_pre, c2, a2_pre, c3, a3_pre = cache
    d3 = dout * gelu_grad(a3_pre)
    da2, dw, db = _conv_bwd(d3, params["conv3_w"], c3)
    grads["conv3_w"] += dw
    grads["conv3_b"] += db
    d2 = da2 * gelu_grad(a2_pre)
    da1, dw, db = _conv_bwd(d2, params["conv2_w"], c2)
    grads["conv2_w"] += dw
    grads["conv2_b"] += db
    if da1_extra is not None:
        da1 = da1 + da1_extra
    d1 = da1 * gelu_grad(a1_pre)
    _, dw, db = _conv_bwd(d1, params["conv1_w"], c1, need_dx=False)
    grads["conv1_w"] += dw
    grads["conv1_b"] += db


def _gru_fwd(h_prev, x, params, d):
    gate_in = np.concatenate([h_prev, x], axis=0)
    zr_pre, c_zr = _conv_fwd(gate_in, params["gru_zr_w"], params["gru_zr_b"], 1, 0)
    z = sigmoid(zr_pre[:d])
    r = sigmoid(zr_pre[d:])
    cand_in = np.concatenate([r * h_prev, x], axis=0)
    cand_pre, c_cand = _conv_fwd(cand_in, params["gru_cand_w"], params["gru_cand_b"], 1, 1)
    hc = np.tanh(cand_pre)
    h = (1.0 - z) * h_prev + z * hc
    return h, (h_prev, z, r, hc, c_zr, c_cand)


def _gru_bwd(dh, params, cache, d, grads):
    h_prev, z, r, hc, c_zr, c_cand = cache
    dz = dh * (hc - h_prev)
    dhc = dh * z
    dh_prev = dh * (1.0 - z)
    dcand_pre = dhc * (1.0 - hc * hc)
    dcand_in, dw, db = _conv_bwd(dcand_pre, params["gru_cand_w"], c_cand)
    grads["gru_cand_w"] += dw
    grads["gru_cand_b"] += db
    drh = dcand_in[:d]
    dx = dcand_in[d:].copy()
    dr = drh * h_prev
    dh_prev += drh * r
    dzr_pre = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=0)
    dgate_in, dw, db = _conv_bwd(dzr_pre, params["gru_zr_w"], c_zr)
    grads["gru_zr_w"] += dw
    grads["gru_zr_b"] += db
    dh_prev += dgate_in[:d]
    dx += dgate_in[d:]
    return dh_prev, dx


def _encode_fwd(voxel_seq, params, cfg: NetworkConfig):
    dt = cfg.np_dtype
    d = cfg.feature_dim
    h = np.zeros((d, cfg.feat_h, cfg.feat_w), dtype=dt)
    steps = []
    skip = None
    for vox in voxel_seq:
        x = np.ascontiguousarray(vox, dtype=dt) * dt.type(cfg.input_scale)
        if x.shape != (cfg.in_bins, cfg.height, cfg.width):
            raise ValueError(f"voxel shape {x.shape} does not match config "
                             f"({cfg.in_bins}, {cfg.height}, {cfg.width})")
        xt, a1, trunk_cache = _trunk_fwd(x, params)
        h, gru_cache = _gru_fwd(h, xt, params, d)
        steps.append((trunk_cache, gru_cache))
        skip = a1
    return h, skip, steps


def _encode_bwd(dz, dskip, params, steps, cfg: NetworkConfig, grads):
    d = cfg.feature_dim
    dh = dz
    for i in range(len(steps) - 1, -1, -1):
        trunk_cache, gru_cache = steps[i]
        dh, dx = _gru_bwd(dh, params, gru_cache, d, grads)
        da1 = dskip if i == len(steps) - 1 else None
        _trunk_bwd(dx, da1, params, trunk_cache, grads)


# -- decoder -----------------------------------------------------------------

def _decode_fwd(z, skip, params, cfg: NetworkConfig):
    if z.shape != (cfg.feature_dim, cfg.feat_h, cfg.feat_w):
        raise ValueError(f"feature shape {z.shape} does not match config")
    if skip is None:
        skip = np.zeros((cfg.hidden1, cfg.height // 2, cfg.width // 2),
                        dtype=cfg.np_dtype)
    u1 = _up2(z)
    cat = np.concatenate([u1, skip], axis=0)
    d1_pre, c1 = _conv_fwd(cat, params["dec1_w"], params["dec1_b"], 1, 1)
    d1 = gelu(d1_pre)
    u2 = _up2(d1)
    d2_pre, c2 = _conv_fwd(u2, params["dec2_w"], params["dec2_b"], 1, 1)
    d2 = gelu(d2_pre)
    logits, c3 = _conv_fwd(d2, params["head_w"], params["head_b"], 1, 0)
    return logits, (d1_pre, c1, d2_pre, c2, c3)


def _decode_bwd(dlogits, params, cache, cfg: NetworkConfig, grads):
    d1_pre, c1, d2_pre, c2, c3 = cache
    dd2, dw, db = _conv_bwd(dlogits, params["head_w"], c3)
    grads["head_w"] += dw
    grads["head_b"] += db
    dd2_pre = dd2 * gelu_grad(d2_pre)
    du2, dw, db = _conv_bwd(dd2_pre, params["dec2_w"], c2)
    grads["dec2_w"] += dw
    grads["dec2_b"] += db
    dd1 = _up2_bwd(du2)
    dd1_pre = dd1 * gelu_grad(d1_pre)
    dcat, dw, db = _conv_bwd(dd1_pre, params["dec1_w"], c1)
    grads["dec1_w"] += dw
    grads["dec1_b"] += db
    dz = _up2_bwd(dcat[:cfg.feature_dim])
    dskip = dcat[cfg.feature_dim:]
    return dz, dskip


# -- public API ---------------------------------------------------------------

def encode(voxel_seq, params, cfg: NetworkConfig) -> np.ndarray:
    """Fold a voxel sub-window sequence into the bottleneck feature map."""
    z, _, _ = _encode_fwd(_as_arrays(voxel_seq), params, cfg)
    return z


def decode(z, params, cfg: NetworkConfig, skip=None) -> np.ndarray:
    """Upsampling decoder; returns (C, H, W) logits at input resolution."""
    logits, _ = _decode_fwd(z, skip, params, cfg)
    return logits


def _as_arrays(voxel_seq):
    out = []
    for v in voxel_seq:
        out.append(v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else v)
    return out


class ForwardState:
    """Caches from one full forward pass of a branch, consumed by backward()."""

    __slots__ = ("z", "skip", "logits", "_enc_steps", "_dec_cache", "_cfg")

    def __init__(self, z, skip, logits, enc_steps, dec_cache, cfg):
        self.z = z
        self.skip = skip
        self.logits = logits
        self._enc_steps = enc_steps
        self._dec_cache = dec_cache
        self._cfg = cfg


def forward(voxel_seq, params, cfg: NetworkConfig) -> ForwardState:
    z, skip, enc_steps = _encode_fwd(_as_arrays(voxel_seq), params, cfg)
    logits, dec_cache = _decode_fwd(z, skip, params, cfg)
    return ForwardState(z, skip, logits, enc_steps, dec_cache, cfg)


def backward(state: ForwardState, params, dlogits=None, dz_extra=None) -> dict:
    """Accumulate parameter gradients for one branch.

    dlogits feeds the decoder head; dz_extra is added to the feature-map
    gradient (contrastive-loss path). Returns a name -> grad dict.
    """
    cfg = state._cfg
    dt = cfg.np_dtype
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if dlogits is None:
        dz = np.zeros_like(state.z)
        dskip = np.zeros_like(state.skip)
    else:
        dz, dskip = _decode_bwd(np.asarray(dlogits, dtype=dt), params,
                                state._dec_cache, cfg, grads)
    if dz_extra is not None:
        dz = dz + dz_extra
    _encode_bwd(dz, dskip, params, state._enc_steps, cfg, grads)
    return grads


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Self-describing npz: a json 'meta' entry plus named arrays."""
    payload = {k: v for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps({"format_version": CHECKPOINT_VERSION, **meta}).encode(), dtype=np.uint8)
    np.savez_compressed(path, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version: {meta.get('format_version')}"
                f" (expected {CHECKPOINT_VERSION})")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta


def config_to_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> NetworkConfig:
    return NetworkConfig(**d)
