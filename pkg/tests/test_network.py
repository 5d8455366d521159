"""Shape contracts, determinism, gradients, and checkpointing for the model."""

import numpy as np
import pytest

from evseg import network


def tiny_cfg(**kw):
    base = dict(class_count=4, height=16, width=16, in_bins=3, feature_dim=8,
                hidden1=4, hidden2=6, dec1=5, dec2=4, recurrent_steps=2,
                seed=0, dtype="float64")
    base.update(kw)
    return network.NetworkConfig(**base)


def random_voxels(rng, cfg, steps=None):
    steps = steps or cfg.recurrent_steps
    return [rng.standard_normal((cfg.in_bins, cfg.height, cfg.width))
            for _ in range(steps)]


# -- shape and determinism contracts ------------------------------------------------

def test_forward_shapes(rng):
    cfg = tiny_cfg()
    params = network.init_params(cfg)
    st = network.forward(random_voxels(rng, cfg), params, cfg)
    assert st.z.shape == (cfg.feature_dim, cfg.feat_h, cfg.feat_w)
    assert st.logits.shape == (cfg.class_count, cfg.height, cfg.width)
    assert np.all(np.isfinite(st.logits)) and np.all(np.isfinite(st.z))


def test_feature_resolution_is_input_over_stride():
    cfg = tiny_cfg(height=32, width=24)
    assert (cfg.feat_h, cfg.feat_w) == (8, 6)
    assert cfg.stride == 4


def test_config_rejects_indivisible_size():
    with pytest.raises(ValueError):
        tiny_cfg(height=18)


def test_forward_bitwise_deterministic(rng):
    cfg = tiny_cfg()
    params = network.init_params(cfg)
    vox = random_voxels(rng, cfg)
    a = network.forward(vox, params, cfg)
    b = network.forward(vox, params, cfg)
    assert np.array_equal(a.logits, b.logits) and np.array_equal(a.z, b.z)


def test_output_shape_independent_of_sequence_length(rng):
    cfg = tiny_cfg()
    params = network.init_params(cfg)
    for steps in (1, 2, 4):
        st = network.forward(random_voxels(rng, cfg, steps), params, cfg)
        assert st.logits.shape == (cfg.class_count, cfg.height, cfg.width)


def test_encode_rejects_shape_mismatch(rng):
    cfg = tiny_cfg()
    params = network.init_params(cfg)
    bad = [rng.standard_normal((cfg.in_bins, 8, 8))]
    with pytest.raises(ValueError):
        network.forward(bad, params, cfg)


def test_init_is_seeded():
    a = network.init_params(tiny_cfg(seed=5))
    b = network.init_params(tiny_cfg(seed=5))
    c = network.init_params(tiny_cfg(seed=6))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_branch_params_independent(rng):
    # mutating one parameter set must not affect a forward pass on another
    cfg = tiny_cfg()
    pf = network.init_params(cfg)
    pb = network.init_params(tiny_cfg(seed=1))
    vox = random_voxels(rng, cfg)
    before = network.forward(vox, pf, cfg).logits.copy()
    for v in pb.values():
        v += 100.0
    after = network.forward(vox, pf, cfg).logits
    assert np.array_equal(before, after)


def test_shift_consistency(rng):
    # shifting the input by one stride shifts features by one cell (interior)
    cfg = tiny_cfg(height=64, width=64)
    params = network.init_params(cfg)
    vox = [np.zeros((cfg.in_bins, 64, 64)) for _ in range(2)]
    for v in vox:
        v[:, 16:48, 16:40] = rng.standard_normal((cfg.in_bins, 32, 24))
    shifted = [np.roll(v, cfg.stride, axis=2) for v in vox]
    z0 = network.forward(vox, params, cfg).z
    z1 = network.forward(shifted, params, cfg).z
    interior = np.s_[:, 6:10, 6:10]
    assert np.max(np.abs(z1[:, 6:10, 7:11] - z0[interior])) < 1e-5


# -- projection pair ----------------------------------------------------------------

def test_project_identity_map(rng):
    d = 8
    pair = {"f2b_w": np.eye(d), "f2b_b": np.zeros(d),
            "b2f_w": np.eye(d), "b2f_b": np.zeros(d)}
    v = rng.standard_normal(d)
    assert np.array_equal(network.project(pair, v, "f2b"), v)
    m = rng.standard_normal((d, 5, 3))
    assert np.allclose(network.project(pair, m, "b2f"), m)


def test_project_linearity(rng):
    cfg = tiny_cfg()
    pair = network.init_projection_pair(cfg.feature_dim)
    u, v = rng.standard_normal((2, cfg.feature_dim))
    lhs = network.project(pair, 2.0 * u + 3.0 * v, "f2b")
    rhs = 2.0 * network.project(pair, u, "f2b") + 3.0 * network.project(pair, v, "f2b") \
        - pair["f2b_b"] * 4.0   # bias is affine: correct for the extra copies
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_project_matches_matvec(rng):
    cfg = tiny_cfg()
    pair = network.init_projection_pair(cfg.feature_dim)
    v = rng.standard_normal(cfg.feature_dim)
    assert np.allclose(network.project(pair, v, "b2f"),
                       pair["b2f_w"] @ v + pair["b2f_b"], atol=1e-12)


def test_projection_initialized_near_identity():
    cfg = tiny_cfg()
    pair = network.init_projection_pair(cfg.feature_dim)
    assert np.max(np.abs(pair["f2b_w"] - np.eye(cfg.feature_dim))) < 0.1
    assert np.max(np.abs(pair["f2b_b"])) < 0.1


def test_project_rejects_bad_direction(rng):
    pair = network.init_projection_pair(tiny_cfg().feature_dim)
    with pytest.raises(ValueError):
        network.project(pair, rng.standard_normal(8), "sideways")


# -- gradients ----------------------------------------------------------------------

def test_backward_matches_finite_differences(rng):
    cfg = tiny_cfg()
    params = network.init_params(cfg)
    vox = random_voxels(rng, cfg)
    rl = rng.standard_normal((cfg.class_count, cfg.height, cfg.width))
    rz = rng.standard_normal((cfg.feature_dim, cfg.feat_h, cfg.feat_w))

    st = network.forward(vox, params, cfg)
    grads = network.backward(st, params, rl.copy(), dz_extra=rz.copy())

    def loss():
        s = network.forward(vox, params, cfg)
        return float((s.logits * rl).sum() + (s.z * rz).sum())

    eps = 1e-6
    worst = 0.0
    for name, arr in params.items():
        flat, g = arr.ravel(), grads[name].ravel()
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    assert worst < 1e-4


def test_backward_covers_all_parameters(rng):
    cfg = tiny_cfg()
    params = network.init_params(cfg)
    st = network.forward(random_voxels(rng, cfg), params, cfg)
    grads = network.backward(st, params,
                             rng.standard_normal(st.logits.shape))
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape for k in params)


# -- checkpoint format ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_cfg(seed=11)
    params = network.init_params(cfg)
    path = tmp_path / "ckpt.npz"
    network.save_checkpoint(path, params,
                            {"step": 17, "network": network.config_to_dict(cfg)})
    params2, meta = network.load_checkpoint(path)
    assert network.config_from_dict(meta["network"]) == cfg
    assert meta["step"] == 17
    assert set(params2) == set(params)
    assert all(np.array_equal(params2[k], params[k]) for k in params)


def test_checkpoint_rejects_wrong_version(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "ckpt.npz"
    network.save_checkpoint(path, network.init_params(cfg), {})
    import json
    import numpy as np
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    meta["format_version"] = 999
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="version"):
        network.load_checkpoint(path)


def test_gelu_matches_reference(rng):
    x = rng.standard_normal(100)
    from scipy.special import erf
    ref = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    assert np.allclose(network.gelu(x), ref, atol=1e-12)
    eps = 1e-6
    fd = (network.gelu(x + eps) - network.gelu(x - eps)) / (2 * eps)
    assert np.allclose(network.gelu_grad(x), fd, atol=1e-6)
