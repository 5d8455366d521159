"""Simulator: threshold-crossing automaton, dense GT, point sampling, corruption."""

import numpy as np
import pytest

from evseg import synth
from evseg import kernels
from evseg.labels import IGNORE


def _one_object_scene(shape="disk", size=(6.0,), velocity=(40.0, 0.0),
                      intensity=2.5, class_id=1):
    obj = synth.SceneObject(class_id, shape, size, intensity, (20.0, 32.0), velocity)
    return synth.SceneSpec(64, 64, 1.0, (obj,), 200_000, 6)


# -- event generation -------------------------------------------------------------

def test_static_scene_emits_nothing():
    scene = _one_object_scene(velocity=(0.0, 0.0))
    s = synth.simulate_events(scene, synth.SimConfig())
    assert len(s) == 0


def test_single_step_emits_floor_delta_over_theta():
    # one pixel stepping +3*theta in one frame interval -> exactly 3 events
    theta = 0.2
    frames = np.zeros((2, 1, 1))
    frames[1, 0, 0] = 3 * theta
    ts = np.array([0, 1000], dtype=np.int64)
    xs, ys, t_ev, ps = kernels.event_automaton(frames, ts, theta)
    assert len(t_ev) == 3 and np.all(ps == 1)
    # timestamps interpolate linearly at the crossing fractions 1/3, 2/3, 1
    assert list(t_ev) == [333, 666, 1000]


def test_subthreshold_residual_carries_across_frames():
    # +0.6*theta per frame: fires at cumulative crossings, not per frame
    theta = 0.2
    frames = np.array([0.0, 0.12, 0.24, 0.36])[:, None, None]
    ts = np.arange(4, dtype=np.int64) * 100
    xs, ys, t_ev, ps = kernels.event_automaton(frames, ts, theta)
    assert len(t_ev) == 1   # floor(0.24/0.2) after two frames; residual 0.16 left
    xs, ys, t_ev, ps = kernels.event_automaton(
        np.array([0.0, 0.12, 0.24, 0.45])[:, None, None], ts, theta)
    assert len(t_ev) == 2


def test_moving_disk_matches_per_pixel_replay():
    scene = _one_object_scene()
    cfg = synth.SimConfig(contrast_threshold=0.25, frame_rate=200)
    s = synth.simulate_events(scene, cfg)
    assert len(s) > 0
    # brute-force replay: per pixel, walk frames and fire on |log I - ref| >= theta
    ts_frames = np.round(np.linspace(0, scene.duration_us,
                                     int(round(scene.duration_us * cfg.frame_rate / 1e6)) + 1)
                         ).astype(np.int64)
    logs = np.stack([np.log(synth.render_intensity(scene, t)) for t in ts_frames])
    count = np.zeros((64, 64), dtype=np.int64)
    pol = np.zeros((64, 64), dtype=np.int64)
    for y in range(64):
        for x in range(64):
            ref = logs[0, y, x]
            for k in range(1, len(ts_frames)):
                delta = logs[k, y, x] - ref
                n = int(np.floor(abs(delta) / cfg.contrast_threshold + 1e-9))
                if n:
                    count[y, x] += n
                    pol[y, x] += n * int(np.sign(delta))
                    ref += np.sign(delta) * n * cfg.contrast_threshold
    got_count = np.zeros((64, 64), dtype=np.int64)
    np.add.at(got_count, (s.ys, s.xs), 1)
    assert np.array_equal(got_count, count)
    from evseg.events import net_mass
    assert np.array_equal(net_mass(s), pol)


def test_simulation_determinism_and_bounds():
    scene = _one_object_scene(shape="bar", size=(15.0, 3.0, 45.0))
    a = synth.simulate_events(scene, synth.SimConfig())
    b = synth.simulate_events(scene, synth.SimConfig())
    assert np.array_equal(a.ts, b.ts) and np.array_equal(a.xs, b.xs)
    assert a.ts.min() >= 0 and a.ts.max() <= scene.duration_us
    assert a.xs.max() < 64 and a.ys.max() < 64


def test_nonpositive_intensity_rejected():
    with pytest.raises(ValueError, match="positive"):
        _one_object_scene(intensity=0.0)
    with pytest.raises(ValueError, match="positive"):
        synth.SceneSpec(8, 8, background=0.0)


# -- dense ground truth -----------------------------------------------------------

def test_dense_gt_empty_scene():
    scene = synth.SceneSpec(8, 8)
    assert not synth.dense_gt(scene, 0).any()


def test_dense_gt_disk():
    obj = synth.SceneObject(3, "disk", (2.0,), 2.0, (4.0, 4.0), (0.0, 0.0))
    gt = synth.dense_gt(synth.SceneSpec(9, 9, objects=(obj,), class_count=6), 0)
    ys, xs = np.mgrid[0:9, 0:9]
    inside = (xs - 4.0) ** 2 + (ys - 4.0) ** 2 <= 4.0
    assert np.array_equal(gt == 3, inside)


def test_dense_gt_painters_order():
    a = synth.SceneObject(1, "rectangle", (6.0, 6.0), 2.0, (4.0, 4.0), (0.0, 0.0))
    b = synth.SceneObject(2, "rectangle", (6.0, 6.0), 3.0, (6.0, 4.0), (0.0, 0.0))
    gt = synth.dense_gt(synth.SceneSpec(16, 16, objects=(a, b), class_count=6), 0)
    assert gt[4, 5] == 2       # overlap takes the later object's class
    assert gt[4, 1] == 1
    # per-pixel painter oracle
    m_a = (np.abs(np.arange(16)[None, :] - 4.0) <= 3.0) & \
          (np.abs(np.arange(16)[:, None] - 4.0) <= 3.0)
    m_b = (np.abs(np.arange(16)[None, :] - 6.0) <= 3.0) & \
          (np.abs(np.arange(16)[:, None] - 4.0) <= 3.0)
    expect = np.zeros((16, 16), dtype=np.uint8)
    expect[m_a] = 1
    expect[m_b] = 2
    assert np.array_equal(gt, expect)


def test_dense_gt_rejects_time_outside_duration():
    with pytest.raises(ValueError):
        synth.dense_gt(synth.SceneSpec(8, 8), 300_000)


# -- point-label sampling ---------------------------------------------------------

def test_sample_point_labels_one_per_present_class(rng):
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt[2:4, 2:4] = 2
    lbl = synth.sample_point_labels(gt, 1, rng)
    assert lbl.mode == "1C1C" and lbl.classes() == {0, 2}
    for p in lbl.points:
        assert gt[p.y, p.x] == p.class_id


def test_sample_point_labels_k10_all_zero_canvas(rng):
    gt = np.zeros((8, 8), dtype=np.uint8)
    lbl = synth.sample_point_labels(gt, 10, rng)
    assert lbl.mode == "1C10C" and len(lbl) == 10
    assert lbl.classes() == {0}


def test_sample_point_labels_capped_by_availability(rng):
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[0, 0] = 1        # a single class-1 pixel
    lbl = synth.sample_point_labels(gt, 10, rng)
    assert sum(p.class_id == 1 for p in lbl.points) == 1


def test_sample_point_labels_deterministic():
    gt = (np.arange(64).reshape(8, 8) % 3).astype(np.uint8)
    a = synth.sample_point_labels(gt, 2, np.random.default_rng(9))
    b = synth.sample_point_labels(gt, 2, np.random.default_rng(9))
    assert a.points == b.points


def test_sample_point_labels_skips_ignore(rng):
    gt = np.full((6, 6), IGNORE, dtype=np.uint8)
    gt[0, 0] = 1
    lbl = synth.sample_point_labels(gt, 1, rng)
    assert lbl.classes() == {1}


# -- label corruption -------------------------------------------------------------

def _labels():
    return synth.make_label_set([(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)])


def test_corrupt_drop_rate_zero_identity(rng):
    lbl = _labels()
    assert synth.corrupt_drop(lbl, {1, 2}, 0.0, rng).points == lbl.points


def test_corrupt_drop_rate_one_drops_all(rng):
    lbl = _labels()
    out = synth.corrupt_drop(lbl, {0, 1, 2, 3}, 1.0, rng)
    assert len(out) == 0


def test_corrupt_drop_only_confusing_classes(rng):
    lbl = _labels()
    out = synth.corrupt_drop(lbl, {1}, 1.0, rng)
    assert out.classes() == {0, 2, 3}


def test_corrupt_drop_monte_carlo_rate():
    dropped = kept = 0
    for seed in range(2500):
        rng = np.random.default_rng(seed)
        out = synth.corrupt_drop(_labels(), {1, 2, 3}, 0.1, rng)
        dropped += 3 - sum(p.class_id in {1, 2, 3} for p in out.points)
        kept += 3
    assert abs(dropped / kept - 0.1) < 0.02


def test_corrupt_swap_p_zero_identity(rng):
    lbl = _labels()
    assert synth.corrupt_swap(lbl, 0.0, rng).points == lbl.points


def test_corrupt_swap_two_points_p_one(rng):
    lbl = synth.make_label_set([(0, 0, 1), (5, 5, 2)])
    out = synth.corrupt_swap(lbl, 1.0, rng)
    assert {(p.x, p.y) for p in out.points} == {(0, 0), (5, 5)}
    by_xy = {(p.x, p.y): p.class_id for p in out.points}
    assert by_xy[(0, 0)] == 2 and by_xy[(5, 5)] == 1


def test_corrupt_swap_preserves_count_and_positions(rng):
    lbl = _labels()
    out = synth.corrupt_swap(lbl, 1.0, rng)
    assert len(out) == len(lbl)
    assert sorted((p.x, p.y) for p in out.points) == \
        sorted((p.x, p.y) for p in lbl.points)


def test_corrupt_swap_monte_carlo_rate():
    swapped = 0
    for seed in range(2500):
        rng = np.random.default_rng(seed)
        out = synth.corrupt_swap(_labels(), 0.2, rng)
        swapped += out.points != _labels().points
    assert abs(swapped / 2500 - 0.2) < 0.02


def test_smallest_area_classes():
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt[0:5, 0:5] = 1
    gt[0, 9] = 2
    gt[9, 0:3] = 3
    assert synth.smallest_area_classes(gt, 2) == [2, 3]


def test_random_scene_rejects_cramped_canvas():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="travel"):
        synth.random_scene(rng, width=16, height=16, class_count=4)


# -- sample assembly and persistence ----------------------------------------------

def test_sample_rejects_label_gt_disagreement():
    gt = np.zeros((4, 4), dtype=np.uint8)
    lbl = synth.make_label_set([(0, 0, 1)])
    from evseg.events import empty_stream
    with pytest.raises(ValueError, match="disagrees"):
        synth.SyntheticSample("s", empty_stream(4, 4), 0, gt, lbl)


def test_make_sample_consistency():
    s = synth.make_sample("demo", synth.sample_seed_for(3, 0))
    assert s.gt.shape == (64, 64)
    assert len(s.labels) == len(np.unique(s.gt))
    for p in s.labels.points:
        assert s.gt[p.y, p.x] == p.class_id
    assert s.t_ref == 60_000


def test_save_load_round_trip(tmp_path):
    s = synth.make_sample("demo", synth.sample_seed_for(3, 1))
    d = tmp_path / "demo"
    synth.save_sample(s, d)
    r = synth.load_sample(d)
    assert r.sample_id == "demo" and r.t_ref == s.t_ref and r.seed == s.seed
    assert np.array_equal(r.gt, s.gt)
    assert r.labels.points == s.labels.points
    assert np.array_equal(r.events.ts, s.events.ts)
    assert r.scene == s.scene


def test_load_dataset_with_label_override(tmp_path):
    s = synth.make_sample("demo", synth.sample_seed_for(3, 1))
    synth.save_sample(s, tmp_path / "demo")
    # override with a single-point bundle at dataset root
    p0 = s.labels.points[0]
    from evseg.labels import write_labels_json
    write_labels_json([{"frame_id": "demo", "mode": "1C1C",
                        "points": [{"x": p0.x, "y": p0.y, "class_id": p0.class_id}]}],
                      tmp_path / "labels.json")
    loaded = synth.load_dataset(tmp_path)
    assert len(loaded) == 1 and len(loaded[0].labels) == 1


def test_split_is_stable():
    flags = [synth.is_eval_sample(synth.sample_seed_for(7, i)) for i in range(200)]
    frac = sum(flags) / len(flags)
    assert 0.1 < frac < 0.35    # ~20% eval split
    assert flags == [synth.is_eval_sample(synth.sample_seed_for(7, i))
                     for i in range(200)]
