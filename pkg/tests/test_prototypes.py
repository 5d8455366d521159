"""Class prototypes: aggregation, queueing, contrast and distillation losses."""

import math

import numpy as np
import pytest

from evseg import prototypes as pr
from evseg.network import init_projection_pair, project

from _util import random_orthogonal

DIM = 8


def unit(v):
    return v / np.linalg.norm(v)


def make_protos(rng, class_ids, branch="f"):
    return {c: pr.ClassPrototype(unit(rng.standard_normal(DIM)), c, branch)
            for c in class_ids}


# -- normalize_rows -------------------------------------------------------------------

def test_normalize_rows_unit_norm(rng):
    m = rng.standard_normal((5, DIM)) * 10
    out = pr.normalize_rows(m)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_normalize_rows_zero_row_stays_zero():
    m = np.zeros((2, DIM))
    m[1, 0] = 3.0
    out = pr.normalize_rows(m)
    assert not out[0].any() and out[1, 0] == 1.0


def test_prototype_validation(rng):
    with pytest.raises(ValueError, match="1-D"):
        pr.ClassPrototype(np.zeros((2, 2)), 0, "f")
    with pytest.raises(ValueError, match="source_branch"):
        pr.ClassPrototype(np.zeros(DIM), 0, "fwd")


# -- intra-window aggregation ----------------------------------------------------------

def test_intra_single_pixel_is_normalized_feature(rng):
    z = rng.standard_normal((DIM, 2, 2))
    conf = np.zeros((2, 2))
    conf[1, 1] = 0.7
    assign = np.full((2, 2), 255, dtype=np.int64)
    assign[1, 1] = 3
    out = pr.intra_aggregate(z, conf, assign, "f")
    assert list(out) == [3]
    proto = out[3]
    assert proto.class_id == 3 and proto.source_branch == "f"
    assert np.allclose(proto.vector, unit(z[:, 1, 1]), atol=1e-12)


def test_intra_orthonormal_pair_oracle():
    # two orthonormal pixels with weights 1 and 3: mean of normalized
    # features is (e0 + 3 e1)/4, renormalized to (e0 + 3 e1)/sqrt(10)
    z = np.zeros((DIM, 1, 2))
    z[0, 0, 0] = 2.0      # normalizes to e0
    z[1, 0, 1] = 5.0      # normalizes to e1
    conf = np.array([[1.0, 3.0]])
    assign = np.zeros((1, 2), dtype=np.int64)
    proto = pr.intra_aggregate(z, conf, assign, "b")[0]
    expect = np.zeros(DIM)
    expect[0], expect[1] = 1.0, 3.0
    assert np.allclose(proto.vector, unit(expect), atol=1e-12)


def test_intra_invariant_to_feature_scale(rng):
    z = rng.standard_normal((DIM, 4, 4))
    conf = rng.uniform(0.1, 1.0, (4, 4))
    assign = rng.integers(0, 3, (4, 4))
    a = pr.intra_aggregate(z, conf, assign, "f")
    b = pr.intra_aggregate(z * 7.5, conf, assign, "f")
    assert sorted(a) == sorted(b)
    for cls in a:
        assert np.allclose(a[cls].vector, b[cls].vector, atol=1e-6)


def test_intra_unit_norm_and_class_coverage(rng):
    z = rng.standard_normal((DIM, 6, 6))
    conf = rng.uniform(0.0, 1.0, (6, 6))
    assign = rng.integers(0, 4, (6, 6))
    assign[0, :3] = 255
    protos = pr.intra_aggregate(z, conf, assign, "f")
    assert sorted(protos) == sorted(set(assign[assign != 255]))
    for p in protos.values():
        assert np.linalg.norm(p.vector) == pytest.approx(1.0, abs=1e-6)


def test_intra_min_pixels_filter(rng):
    z = rng.standard_normal((DIM, 3, 3))
    conf = np.ones((3, 3))
    assign = np.zeros((3, 3), dtype=np.int64)
    assign[0, 0] = 1    # class 1 has a single pixel
    got = pr.intra_aggregate(z, conf, assign, "f", min_pixels=2)
    assert list(got) == [0]


def test_intra_ignores_zero_confidence_pixels(rng):
    z = rng.standard_normal((DIM, 2, 2))
    conf = np.zeros((2, 2))
    assign = np.zeros((2, 2), dtype=np.int64)
    assert pr.intra_aggregate(z, conf, assign, "f") == {}


def test_intra_shape_mismatch(rng):
    z = rng.standard_normal((DIM, 2, 2))
    with pytest.raises(ValueError, match="shape"):
        pr.intra_aggregate(z, np.ones((3, 2)), np.zeros((2, 2), dtype=np.int64), "f")


# -- prototype bank --------------------------------------------------------------------

def push_one(bank, cls, vec, branch):
    bank.push({cls: pr.ClassPrototype(vec, cls, branch)})


def test_bank_fifo_eviction(rng):
    bank = pr.PrototypeBank(DIM, "f", capacity=3)
    vecs = [unit(rng.standard_normal(DIM)) for _ in range(5)]
    for v in vecs:
        push_one(bank, 0, v, "f")
    # inter-aggregate over the last capacity entries only
    expect = unit(np.mean(vecs[-3:], axis=0))
    assert np.allclose(bank.inter_aggregate(0).vector, expect, atol=1e-12)


def test_bank_inter_is_normalized_queue_mean(rng):
    bank = pr.PrototypeBank(DIM, "b", capacity=32)
    vecs = [unit(rng.standard_normal(DIM)) for _ in range(7)]
    for v in vecs:
        push_one(bank, 2, v, "b")
    got = bank.inter_aggregate(2)
    assert got.class_id == 2 and got.source_branch == "b"
    assert np.allclose(got.vector, unit(np.mean(vecs, axis=0)), atol=1e-12)
    assert np.linalg.norm(got.vector) == pytest.approx(1.0, abs=1e-12)


def test_bank_cancelling_mean_falls_back_to_most_recent():
    bank = pr.PrototypeBank(DIM, "f", capacity=4)
    v = np.zeros(DIM)
    v[0] = 1.0
    push_one(bank, 1, v, "f")
    push_one(bank, 1, -v, "f")
    assert np.allclose(bank.inter_aggregate(1).vector, -v, atol=1e-12)


def test_bank_classes_and_missing_class(rng):
    bank = pr.PrototypeBank(DIM, "f")
    bank.push(make_protos(rng, [0, 2]))
    assert bank.classes() == [0, 2]
    with pytest.raises(KeyError, match="1"):
        bank.inter_aggregate(1)
    got = bank.all_inter()
    assert sorted(got) == [0, 2]
    assert all(p.source_branch == "f" for p in got.values())


def test_bank_rejects_wrong_dimension(rng):
    bank = pr.PrototypeBank(DIM, "f")
    with pytest.raises(ValueError, match="dimension"):
        bank.push({0: pr.ClassPrototype(np.ones(DIM + 1), 0, "f")})
    with pytest.raises(ValueError, match="capacity"):
        pr.PrototypeBank(DIM, "f", capacity=0)


def test_bank_state_round_trip(rng):
    bank = pr.PrototypeBank(DIM, "b", capacity=5)
    for _ in range(8):
        bank.push(make_protos(rng, [0, 1, 3], "b"))
    arrays = bank.state_arrays()
    clone = pr.PrototypeBank.from_state(DIM, "b", 5, arrays)
    assert clone.classes() == bank.classes()
    for c in bank.classes():
        assert np.array_equal(clone.inter_aggregate(c).vector,
                              bank.inter_aggregate(c).vector)


# -- dual combination ------------------------------------------------------------------

def test_dual_combine_normalized_sum(rng):
    a = make_protos(rng, [0])[0]
    b = pr.ClassPrototype(unit(rng.standard_normal(DIM)), 0, "b")
    got = pr.dual_combine(a, b)
    assert np.allclose(got.vector, unit(a.vector + b.vector), atol=1e-12)
    assert got.class_id == 0 and got.source_branch == a.source_branch


def test_dual_combine_opposite_vectors_keep_own():
    v = np.zeros(DIM)
    v[2] = 1.0
    own = pr.ClassPrototype(v, 1, "f")
    other = pr.ClassPrototype(-v, 1, "b")
    got = pr.dual_combine(own, other)
    assert np.allclose(got.vector, v, atol=1e-12)


def test_dual_combine_class_mismatch_rejected(rng):
    a = pr.ClassPrototype(unit(rng.standard_normal(DIM)), 0, "f")
    b = pr.ClassPrototype(unit(rng.standard_normal(DIM)), 1, "b")
    with pytest.raises(ValueError, match="class"):
        pr.dual_combine(a, b)


# -- prototype contrast loss -----------------------------------------------------------

def test_contrast_orthogonal_prototypes_frozen_value(rng):
    # pixel feature equal to its target prototype, all prototypes orthonormal,
    # sharpness 0.1: loss is log(1 + 3 e^{-10}) per pixel
    protos = {i: pr.ClassPrototype(np.eye(DIM)[i], i, "b") for i in range(4)}
    z = np.zeros((DIM, 1, 1))
    z[2, 0, 0] = 1.0
    targets = np.full((1, 1), 2, dtype=np.int64)
    loss, n = pr.proto_contrast_loss(z, protos, targets, beta=0.1)
    assert n == 1
    assert loss == pytest.approx(math.log(1 + 3 * math.exp(-10)), abs=1e-12)
    assert loss == pytest.approx(1.3619e-4, abs=1e-8)


def test_contrast_identical_prototypes_log_k(rng):
    v = unit(rng.standard_normal(DIM))
    protos = {c: pr.ClassPrototype(v, c, "b") for c in range(5)}
    z = np.tile(v.reshape(DIM, 1, 1), (1, 2, 2))
    targets = np.full((2, 2), 3, dtype=np.int64)
    loss, n = pr.proto_contrast_loss(z, protos, targets)
    assert n == 4
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_contrast_matches_log_sum_exp_oracle(rng):
    protos = make_protos(rng, [0, 1, 2], "b")
    z = rng.standard_normal((DIM, 3, 3))
    targets = rng.integers(0, 3, (3, 3))
    loss, n = pr.proto_contrast_loss(z, protos, targets, beta=0.1)
    assert n == 9
    zn = z / np.linalg.norm(z, axis=0, keepdims=True)
    pmat = [protos[c].vector for c in sorted(protos)]
    total = 0.0
    for y in range(3):
        for x in range(3):
            sims = np.array([zn[:, y, x] @ p for p in pmat]) / 0.1
            total += math.log(np.exp(sims - sims.max()).sum()) + sims.max() - sims[targets[y, x]]
    assert loss == pytest.approx(total / 9, abs=1e-8)


def test_contrast_non_negative(rng):
    for _ in range(20):
        k = int(rng.integers(2, 6))
        protos = make_protos(rng, list(range(k)), "b")
        z = rng.standard_normal((DIM, 4, 4))
        targets = rng.integers(0, k, (4, 4))
        loss, _ = pr.proto_contrast_loss(z, protos, targets)
        assert loss >= 0.0


def test_contrast_rotation_invariant(rng):
    protos = make_protos(rng, [0, 1, 2, 3], "b")
    z = rng.standard_normal((DIM, 4, 4))
    targets = rng.integers(0, 4, (4, 4))
    base, _ = pr.proto_contrast_loss(z, protos, targets)
    q = random_orthogonal(rng, DIM)
    rot = {c: pr.ClassPrototype(q @ p.vector, c, "b") for c, p in protos.items()}
    zr = np.einsum("ij,jhw->ihw", q, z)
    got, _ = pr.proto_contrast_loss(zr, rot, targets)
    assert got == pytest.approx(base, abs=1e-6)


def test_contrast_degenerate_cases(rng):
    z = rng.standard_normal((DIM, 2, 2))
    targets = np.zeros((2, 2), dtype=np.int64)
    assert pr.proto_contrast_loss(z, make_protos(rng, [0]), targets) == (0.0, 0)
    # no pixel with a prototype-covered target
    protos = make_protos(rng, [1, 2])
    assert pr.proto_contrast_loss(z, protos, targets) == (0.0, 0)
    # ignored pixels drop out
    targets255 = np.full((2, 2), 255, dtype=np.int64)
    protos = make_protos(rng, [0, 1])
    assert pr.proto_contrast_loss(z, protos, targets255) == (0.0, 0)


def test_contrast_skips_pixels_of_absent_classes(rng):
    protos = make_protos(rng, [0, 1], "b")
    z = rng.standard_normal((DIM, 1, 2))
    targets = np.array([[0, 4]])    # class 4 has no prototype
    _, n = pr.proto_contrast_loss(z, protos, targets, beta=0.1)
    assert n == 1


def test_contrast_gradient_matches_finite_differences(rng):
    protos = make_protos(rng, [0, 1, 2], "b")
    z = rng.standard_normal((DIM, 3, 3))
    targets = rng.integers(0, 3, (3, 3))
    loss, n, dz = pr.proto_contrast_loss(z, protos, targets, beta=0.1, with_grad=True)
    assert dz.shape == z.shape
    eps = 1e-6
    for _ in range(15):
        d, y, x = (int(rng.integers(0, s)) for s in z.shape)
        bump = np.zeros_like(z)
        bump[d, y, x] = eps
        lp, _ = pr.proto_contrast_loss(z + bump, protos, targets, beta=0.1)
        lm, _ = pr.proto_contrast_loss(z - bump, protos, targets, beta=0.1)
        assert dz[d, y, x] == pytest.approx((lp - lm) / (2 * eps), abs=1e-7)


def test_contrast_grad_zero_where_no_target(rng):
    protos = make_protos(rng, [0, 1], "b")
    z = rng.standard_normal((DIM, 2, 2))
    targets = np.array([[0, 255], [255, 1]], dtype=np.int64)
    _, _, dz = pr.proto_contrast_loss(z, protos, targets, with_grad=True)
    assert not dz[:, 0, 1].any() and not dz[:, 1, 0].any()
    assert dz[:, 0, 0].any() and dz[:, 1, 1].any()


# -- cross-branch feature distillation --------------------------------------------------

def test_distill_identity_projection_offset_oracle(rng):
    pair = init_projection_pair(DIM, noise=0.0)
    z_b = rng.standard_normal((DIM, 3, 3))
    z_f = z_b + 1.0
    # both directions see a constant residual of one: mean |residual| = 1
    assert pr.distill_loss(z_f, z_b, pair) == pytest.approx(1.0, abs=1e-12)


def test_distill_zero_at_fixed_point(rng):
    pair = init_projection_pair(DIM, noise=0.0)
    z = rng.standard_normal((DIM, 2, 2))
    assert pr.distill_loss(z, z, pair) == pytest.approx(0.0, abs=1e-12)


def test_distill_matches_elementwise_oracle(rng):
    pair = init_projection_pair(DIM, rng=rng, noise=0.05)
    z_f = rng.standard_normal((DIM, 3, 4))
    z_b = rng.standard_normal((DIM, 3, 4))
    expect = 0.5 * (np.abs(project(pair, z_f, "f2b") - z_b).mean()
                    + np.abs(project(pair, z_b, "b2f") - z_f).mean())
    assert pr.distill_loss(z_f, z_b, pair) == pytest.approx(expect, abs=1e-12)


def test_distill_shape_mismatch(rng):
    pair = init_projection_pair(DIM, noise=0.0)
    with pytest.raises(ValueError, match="shape"):
        pr.distill_loss(rng.standard_normal((DIM, 2, 2)),
                        rng.standard_normal((DIM, 2, 3)), pair)


def test_distill_grads_only_touch_projection(rng):
    pair = init_projection_pair(DIM, rng=rng, noise=0.05)
    z_f = rng.standard_normal((DIM, 3, 3))
    z_b = rng.standard_normal((DIM, 3, 3))
    loss, grads = pr.distill_loss(z_f, z_b, pair, with_grad=True)
    assert set(grads) == {"f2b_w", "f2b_b", "b2f_w", "b2f_b"}
    eps = 1e-6
    for key in grads:
        g = grads[key]
        assert g.shape == pair[key].shape
        flat_idx = int(rng.integers(0, g.size))
        idx = np.unravel_index(flat_idx, g.shape)
        pair[key][idx] += eps
        lp = pr.distill_loss(z_f, z_b, pair)
        pair[key][idx] -= 2 * eps
        lm = pr.distill_loss(z_f, z_b, pair)
        pair[key][idx] += eps
        assert g[idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-6)
