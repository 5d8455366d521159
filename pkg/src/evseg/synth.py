"""Synthetic event-scene simulator with dense GT and point-label sampling.

Scenes are flat-intensity objects (disk / rectangle / bar) on a uniform
background, moving on linear trajectories. Events come from a per-pixel
threshold-crossing automaton on log intensity, rendered at an internal frame
rate; sub-threshold residuals carry across frames through the reference
level. Label-corruption utilities model incomplete and noisy annotations.

A sample persists as a directory::

    events.txt   event_core text format
    gt.png       8-bit single channel, class ids (255 = ignore)
    labels.json  single-frame bundle (labels.py schema)
    meta.json    target time, seeds, scene echo
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, asdict, field

import numpy as np

from . import kernels
from .events import EventStream, empty_stream, make_stream, read_events, write_events
from .labels import IGNORE, PointLabelSet, make_label_set, labels_to_record, read_labels_json

SHAPES = ("disk", "rectangle", "bar")


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    shape: str
    size: tuple[float, ...]      # disk: (radius,); rectangle: (w, h); bar: (length, thickness, angle_deg)
    intensity: float
    start: tuple[float, float]   # center (x, y) at t = 0
    velocity: tuple[float, float]  # px / second


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    background: float = 1.0
    objects: tuple[SceneObject, ...] = ()
    duration_us: int = 200_000
    class_count: int = 6

    def __post_init__(self):
        if self.background <= 0:
            raise ValueError("background intensity must be positive (log undefined)")
        for obj in self.objects:
            if obj.intensity <= 0:
                raise ValueError(f"object intensity must be positive, got {obj.intensity}")
            if not (1 <= obj.class_id < self.class_count):
                raise ValueError(f"class_id {obj.class_id} outside 1..{self.class_count - 1}")
            if obj.shape not in SHAPES:
                raise ValueError(f"unknown shape {obj.shape!r}")


@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.2
    frame_rate: float = 500.0    # internal frames / second
    seed: int = 0

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")


def _object_mask(obj: SceneObject, t_us: float, width: int, height: int) -> np.ndarray:
    cx = obj.start[0] + obj.velocity[0] * t_us / 1e6
    cy = obj.start[1] + obj.velocity[1] * t_us / 1e6
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    if obj.shape == "disk":
        (r,) = obj.size
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if obj.shape == "rectangle":
        w, h = obj.size
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    # bar: a thin rectangle rotated by angle_deg
    length, thick, angle = obj.size
    rad = np.deg2rad(angle)
    u = (xs - cx) * np.cos(rad) + (ys - cy) * np.sin(rad)
    v = -(xs - cx) * np.sin(rad) + (ys - cy) * np.cos(rad)
    return (np.abs(u) <= length / 2) & (np.abs(v) <= thick / 2)


def render_intensity(scene: SceneSpec, t_us: float) -> np.ndarray:
    """Scene intensity at time t; later-listed objects occlude earlier ones."""
    img = np.full((scene.height, scene.width), scene.background, dtype=np.float64)
    for obj in scene.objects:
        img[_object_mask(obj, t_us, scene.width, scene.height)] = obj.intensity
    return img


def _frame_times(scene: SceneSpec, config: SimConfig) -> np.ndarray:
    n_intervals = int(round(scene.duration_us * config.frame_rate / 1e6))
    if n_intervals < 1:
        raise ValueError("frame rate too low: need at least 2 frames over the duration")
    return np.round(np.linspace(0, scene.duration_us, n_intervals + 1)).astype(np.int64)


def simulate_events(scene: SceneSpec, config: SimConfig) -> EventStream:
    """Threshold-crossing event generation over internally rendered frames.

    Whenever |log I - ref| >= theta at a pixel, emits floor(|delta|/theta)
    events with polarity sign(delta), timestamps linearly interpolated within
    the frame interval; ref advances by the emitted multiple of theta.
    """
    ts_frames = _frame_times(scene, config)
    log_frames = np.stack([np.log(render_intensity(scene, t)) for t in ts_frames])
    xs, ys, ts, ps = kernels.event_automaton(log_frames, ts_frames,
                                             config.contrast_threshold)
    if len(ts) == 0:
        return empty_stream(scene.width, scene.height)
    return make_stream(xs, ys, ts, ps, scene.width, scene.height)


def dense_gt(scene: SceneSpec, t_us: int) -> np.ndarray:
    """Class-id map at time t; painter's order, background is class 0."""
    if not (0 <= t_us <= scene.duration_us):
        raise ValueError(f"t={t_us} outside scene duration 0..{scene.duration_us}")
    gt = np.zeros((scene.height, scene.width), dtype=np.uint8)
    for obj in scene.objects:
        gt[_object_mask(obj, t_us, scene.width, scene.height)] = obj.class_id
    return gt


def sample_point_labels(gt: np.ndarray, k: int, rng: np.random.Generator) -> PointLabelSet:
    """Uniformly sample min(k, available) distinct pixels per present class."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mode = "1C1C" if k == 1 else "1C10C"
    height, width = gt.shape
    points = []
    for c in sorted(int(v) for v in np.unique(gt) if v != IGNORE):
        flat = np.flatnonzero(gt.ravel() == c)
        take = min(k, len(flat))
        for idx in rng.choice(flat, size=take, replace=False):
            points.append((idx % width, idx // width, c))
    return make_label_set(points, mode)


def corrupt_drop(labels: PointLabelSet, confusing_classes, rate: float,
                 rng: np.random.Generator) -> PointLabelSet:
    """Independently drop confusing-class points with the given probability."""
    if not (0 <= rate <= 1):
        raise ValueError("rate must be in [0, 1]")
    confusing = set(confusing_classes)
    kept = [(p.x, p.y, p.class_id) for p in labels.points
            if p.class_id not in confusing or rng.random() >= rate]
    return make_label_set(kept, labels.mode)


def corrupt_swap(labels: PointLabelSet, p: float,
                 rng: np.random.Generator) -> PointLabelSet:
    """With probability p, exchange the classes of two random distinct points."""
    if not (0 <= p <= 1):
        raise ValueError("p must be in [0, 1]")
    pts = [[q.x, q.y, q.class_id] for q in labels.points]
    if len(pts) >= 2 and rng.random() < p:
        i, j = rng.choice(len(pts), size=2, replace=False)
        pts[i][2], pts[j][2] = pts[j][2], pts[i][2]
    return make_label_set(pts, labels.mode)


def smallest_area_classes(gt: np.ndarray, n: int = 2) -> list[int]:
    """The n rarest non-background classes; default confusing-class choice."""
    ids, counts = np.unique(gt[(gt != 0) & (gt != IGNORE)], return_counts=True)
    order = np.argsort(counts, kind="stable")
    return [int(ids[i]) for i in order[:n]]


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    sample_id: str
    events: EventStream
    t_ref: int
    gt: np.ndarray
    labels: PointLabelSet
    seed: int = 0
    scene: SceneSpec | None = None

    def __post_init__(self):
        for p in self.labels.points:
            actual = int(self.gt[p.y, p.x])
            if actual != p.class_id:
                raise ValueError(
                    f"label class {p.class_id} at ({p.x},{p.y}) disagrees with gt {actual}")


def with_labels(sample: SyntheticSample, labels: PointLabelSet) -> SyntheticSample:
    """Replace the label set, bypassing the gt-consistency check (for corruptions)."""
    out = object.__new__(SyntheticSample)
    object.__setattr__(out, "sample_id", sample.sample_id)
    object.__setattr__(out, "events", sample.events)
    object.__setattr__(out, "t_ref", sample.t_ref)
    object.__setattr__(out, "gt", sample.gt)
    object.__setattr__(out, "labels", labels)
    object.__setattr__(out, "seed", sample.seed)
    object.__setattr__(out, "scene", sample.scene)
    return out


# ---------------------------------------------------------------------------
# Default benchmark scenes: 5 object classes with fixed shape/intensity
# templates, random positions and velocities per sample.
# ---------------------------------------------------------------------------

_CLASS_TEMPLATES = (
    # (class_id, shape, size, intensity)
    (1, "disk", (7.0,), 2.2),
    (2, "rectangle", (13.0, 9.0), 0.45),
    (3, "bar", (17.0, 3.5, 0.0), 3.2),
    (4, "disk", (3.5,), 0.3),
    (5, "rectangle", (7.0, 7.0), 1.7),
)


def random_scene(rng: np.random.Generator, width=64, height=64, class_count=6,
                 duration_us=200_000, min_travel=10.0) -> SceneSpec:
    objects = []
    margin = 8.0
    dur_s = duration_us / 1e6
    if np.hypot(width - 2 * margin, height - 2 * margin) < min_travel:
        raise ValueError(
            f"canvas {width}x{height} leaves no room for objects to travel "
            f"{min_travel} px inside an {margin} px margin")
    for class_id, shape, size, intensity in _CLASS_TEMPLATES[:class_count - 1]:
        while True:
            x0 = rng.uniform(margin, width - margin)
            y0 = rng.uniform(margin, height - margin)
            x1 = rng.uniform(margin, width - margin)
            y1 = rng.uniform(margin, height - margin)
            if np.hypot(x1 - x0, y1 - y0) >= min_travel:
                break
        vel = ((x1 - x0) / dur_s, (y1 - y0) / dur_s)
        if shape == "bar":
            size = (size[0], size[1], float(rng.choice([0.0, 45.0, 90.0, 135.0])))
        objects.append(SceneObject(class_id, shape, size, intensity, (x0, y0), vel))
    return SceneSpec(width, height, 1.0, tuple(objects), duration_us, class_count)


def sample_seed_for(dataset_seed: int, index: int) -> int:
    return dataset_seed * 1_000_003 + index


def is_eval_sample(seed: int) -> bool:
    """Fixed 80/20 split keyed on the per-sample seed."""
    return zlib.crc32(str(seed).encode()) % 5 == 0


def make_sample(sample_id: str, seed: int, width=64, height=64, class_count=6,
                duration_us=200_000, points_per_class=1,
                sim: SimConfig | None = None) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, width, height, class_count, duration_us)
    sim = sim or SimConfig(seed=seed)
    events = simulate_events(scene, sim)
    t_ref = int(duration_us * 0.3)
    gt = dense_gt(scene, t_ref)
    for obj in scene.objects:  # SceneSpec invariant: objects visible at T
        if not np.any(gt == obj.class_id):
            raise ValueError(f"object class {obj.class_id} fully occluded at t={t_ref}")
    lbl = sample_point_labels(gt, points_per_class, rng)
    return SyntheticSample(sample_id, events, t_ref, gt, lbl, seed, scene)


def save_sample(sample: SyntheticSample, out_dir) -> None:
    from PIL import Image
    os.makedirs(out_dir, exist_ok=True)
    write_events(sample.events, os.path.join(out_dir, "events.txt"))
    Image.fromarray(sample.gt, mode="L").save(os.path.join(out_dir, "gt.png"))
    with open(os.path.join(out_dir, "labels.json"), "w") as f:
        json.dump({"frames": [labels_to_record(sample.labels, sample.sample_id)]},
                  f, indent=1, sort_keys=True)
        f.write("\n")
    meta = {"schema_version": 1, "sample_id": sample.sample_id,
            "t_ref": sample.t_ref, "seed": sample.seed,
            "scene": asdict(sample.scene) if sample.scene else None}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def load_sample(sample_dir, labels_override: dict | None = None) -> SyntheticSample:
    from PIL import Image
    sample_id = os.path.basename(os.path.normpath(sample_dir))
    events = read_events(os.path.join(sample_dir, "events.txt"))
    gt = np.asarray(Image.open(os.path.join(sample_dir, "gt.png")), dtype=np.uint8)
    with open(os.path.join(sample_dir, "meta.json")) as f:
        meta = json.load(f)
    if labels_override is not None:
        record = labels_override
    else:
        record = next(iter(read_labels_json(os.path.join(sample_dir, "labels.json")).values()))
    labels = make_label_set([(p["x"], p["y"], p["class_id"]) for p in record["points"]],
                            record.get("mode", "1C1C"))
    scene = None
    if meta.get("scene"):
        s = meta["scene"]
        objects = tuple(SceneObject(o["class_id"], o["shape"], tuple(o["size"]),
                                    o["intensity"], tuple(o["start"]), tuple(o["velocity"]))
                        for o in s["objects"])
        scene = SceneSpec(s["width"], s["height"], s["background"], objects,
                          s["duration_us"], s["class_count"])
    sample = object.__new__(SyntheticSample)
    object.__setattr__(sample, "sample_id", sample_id)
    object.__setattr__(sample, "events", events)
    object.__setattr__(sample, "t_ref", int(meta["t_ref"]))
    object.__setattr__(sample, "gt", gt)
    object.__setattr__(sample, "labels", labels)
    object.__setattr__(sample, "seed", int(meta["seed"]))
    object.__setattr__(sample, "scene", scene)
    return sample


def load_dataset(root) -> list[SyntheticSample]:
    """Load all sample dirs under root; a root-level labels.json bundle,
    when present, overrides per-sample labels (annotation-export path)."""
    override = {}
    bundle = os.path.join(root, "labels.json")
    if os.path.isfile(bundle):
        override = read_labels_json(bundle)
    samples = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if os.path.isdir(d) and os.path.isfile(os.path.join(d, "events.txt")):
            samples.append(load_sample(d, override.get(name)))
    return samples
