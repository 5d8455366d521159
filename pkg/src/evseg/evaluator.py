"""Segmentation metrics and the synthetic ablation harness.

Metrics: per-class intersection-over-union from an accumulated confusion
matrix; pixels whose ground truth is the ignore id stay out of the matrix,
and classes that never appear (zero union) are excluded from the mean.

The harness builds a deterministic synthetic dataset (cached as one npz per
spec), trains one run per (cell, seed), evaluates against dense ground truth,
and aggregates per-cell medians. A failed cell is recorded and skipped so a
sweep never dies halfway.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import synth, trainer
from .labels import IGNORE, make_label_set
from .network import NetworkConfig
from .trainer import TrainConfig


class UndefinedMetricError(RuntimeError):
    """No class has a nonzero union; mean IoU is undefined."""


@dataclass(frozen=True)
class MetricsReport:
    miou: float
    per_class_iou: dict[int, float]
    confusion: np.ndarray
    n_samples: int


def confusion(pred: np.ndarray, gt: np.ndarray, class_count: int) -> np.ndarray:
    """Row = ground-truth class, column = predicted class; ignore-id pixels
    contribute nothing."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = (gt != IGNORE) & (pred != IGNORE)
    g = gt[mask].astype(np.int64)
    p = pred[mask].astype(np.int64)
    if g.size and (int(g.max()) >= class_count or int(p.max()) >= class_count):
        raise ValueError("class id outside [0, class_count) in confusion input")
    cm = np.bincount(g * class_count + p, minlength=class_count * class_count)
    return cm.reshape(class_count, class_count)


def miou_from_confusion(cm: np.ndarray) -> MetricsReport:
    diag = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    valid = union > 0
    if not valid.any():
        raise UndefinedMetricError("confusion matrix is empty")
    per_class = {int(c): float(diag[c] / union[c]) for c in np.nonzero(valid)[0]}
    miou = float(np.mean(list(per_class.values())))
    return MetricsReport(miou, per_class, cm, 0)


def evaluate(state: trainer.TrainerState, samples) -> MetricsReport:
    """Forward-branch predictions against dense ground truth, all samples
    pooled into one confusion matrix."""
    c = state.cfg.network.class_count
    cm = np.zeros((c, c), dtype=np.int64)
    for sample in samples:
        pred = trainer.predict(state, sample)
        cm += confusion(pred, sample.gt, c)
    report = miou_from_confusion(cm)
    return MetricsReport(report.miou, report.per_class_iou, cm, len(samples))


# -- benchmark dataset ----------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSpec:
    width: int = 64
    height: int = 64
    class_count: int = 6
    train_count: int = 200
    eval_count: int = 50
    dataset_seed: int = 20260815
    duration_us: int = 200_000
    points_per_class: int = 1


_DATASET_CACHE: dict = {}


def build_benchmark(spec: BenchmarkSpec, cache_dir=None):
    """Deterministic train/eval sample lists for a spec.

    Per-sample seeds derive from the dataset seed and a running index; the
    80/20 split hashes the per-sample seed, and generation walks indices
    until both quotas are full. Scenes whose objects are occluded at the
    target time are skipped. With cache_dir set the dataset round-trips
    through one npz so repeated runs skip simulation.
    """
    key = spec
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        tag = (f"bench_{spec.dataset_seed}_{spec.width}x{spec.height}"
               f"_{spec.class_count}c_{spec.train_count}+{spec.eval_count}"
               f"_{spec.points_per_class}p")
        path = os.path.join(cache_dir, tag + ".npz")
        if os.path.exists(path):
            data = _load_dataset_npz(path, spec)
            _DATASET_CACHE[key] = data
            return data

    train, evl = [], []
    idx = 0
    while len(train) < spec.train_count or len(evl) < spec.eval_count:
        seed = synth.sample_seed_for(spec.dataset_seed, idx)
        to_eval = synth.is_eval_sample(seed)
        idx += 1
        if to_eval and len(evl) >= spec.eval_count:
            continue
        if not to_eval and len(train) >= spec.train_count:
            continue
        try:
            sample = synth.make_sample(
                f"sample_{idx - 1:05d}", seed, spec.width, spec.height,
                spec.class_count, spec.duration_us, spec.points_per_class)
        except ValueError:
            continue
        (evl if to_eval else train).append(sample)
    data = (train, evl)
    if path is not None:
        _save_dataset_npz(path, spec, train, evl)
    _DATASET_CACHE[key] = data
    return data


def _sample_arrays(prefix: str, s: synth.SyntheticSample) -> dict:
    lbl = np.array([[p.x, p.y, p.class_id] for p in s.labels.points], dtype=np.int64)
    return {
        f"{prefix}/ts": s.events.ts, f"{prefix}/xs": s.events.xs,
        f"{prefix}/ys": s.events.ys, f"{prefix}/ps": s.events.ps,
        f"{prefix}/gt": s.gt, f"{prefix}/labels": lbl,
        f"{prefix}/meta": np.array([s.t_ref, s.seed], dtype=np.int64),
    }


def _sample_from_arrays(data, prefix: str, sample_id: str, spec: BenchmarkSpec):
    from .events import EventStream
    stream = EventStream(
        np.ascontiguousarray(data[f"{prefix}/xs"]),
        np.ascontiguousarray(data[f"{prefix}/ys"]),
        np.ascontiguousarray(data[f"{prefix}/ts"]),
        np.ascontiguousarray(data[f"{prefix}/ps"]),
        spec.width, spec.height)
    lbl = data[f"{prefix}/labels"]
    labels = make_label_set([tuple(int(v) for v in row) for row in lbl],
                            "1C1C" if spec.points_per_class == 1 else "1C10C")
    t_ref, seed = (int(v) for v in data[f"{prefix}/meta"])
    return synth.SyntheticSample(sample_id, stream, t_ref,
                                 np.ascontiguousarray(data[f"{prefix}/gt"]),
                                 labels, seed)


def _save_dataset_npz(path, spec: BenchmarkSpec, train, evl) -> None:
    arrays = {"spec": np.frombuffer(json.dumps(asdict(spec)).encode(), dtype=np.uint8)}
    for i, s in enumerate(train):
        arrays.update(_sample_arrays(f"train{i}", s))
    for i, s in enumerate(evl):
        arrays.update(_sample_arrays(f"eval{i}", s))
    tmp = path + ".tmp.npz"
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)


def _load_dataset_npz(path, spec: BenchmarkSpec):
    with np.load(path) as data:
        stored = json.loads(bytes(data["spec"]).decode())
        if stored != asdict(spec):
            raise ValueError(f"dataset cache {path} was built from a different spec")
        train = [_sample_from_arrays(data, f"train{i}", f"train_{i:05d}", spec)
                 for i in range(spec.train_count)]
        evl = [_sample_from_arrays(data, f"eval{i}", f"eval_{i:05d}", spec)
               for i in range(spec.eval_count)]
    return train, evl


def benchmark_network(spec: BenchmarkSpec) -> NetworkConfig:
    """Training-speed network settings for the synthetic benchmark."""
    return NetworkConfig(class_count=spec.class_count, height=spec.height,
                         width=spec.width, dtype="float32")


def benchmark_train_config(spec: BenchmarkSpec, mode: str, seed: int,
                           threshold: float = 0.5, steps: int = 2000) -> TrainConfig:
    return TrainConfig(mode=mode, steps=steps, batch_size=1, lr=2e-3, seed=seed,
                       threshold=threshold, warmup_steps=200, ramp_steps=400,
                       network=benchmark_network(spec))


# -- ablation harness ----------------------------------------------------------

@dataclass(frozen=True)
class AblationCell:
    name: str
    mode: str = "full"
    threshold: float = 0.5
    swap_prob: float = 0.0
    drop_rate: float = 0.0


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)      # one dict per (cell, seed)
    summary: list = field(default_factory=list)   # one dict per cell (median)

    def median(self, cell_name: str) -> float:
        for row in self.summary:
            if row["cell"] == cell_name:
                return row["miou_median"]
        raise KeyError(cell_name)


def corrupt_training_labels(samples, cell: AblationCell, rng):
    """Per-sample label corruption for a cell; dense gt stays untouched."""
    out = []
    for s in samples:
        lbl = s.labels
        if cell.drop_rate > 0:
            lbl = synth.corrupt_drop(lbl, synth.smallest_area_classes(s.gt),
                                     cell.drop_rate, rng)
        if cell.swap_prob > 0:
            lbl = synth.corrupt_swap(lbl, cell.swap_prob, rng)
        out.append(synth.with_labels(s, lbl) if lbl is not s.labels else s)
    return out


def run_ablation(train_samples, eval_samples, base_cfg: TrainConfig,
                 cells, seeds, out_dir=None, progress=None) -> AblationResult:
    """Train one run per (cell, seed), evaluate on the eval split, aggregate
    per-cell medians. Failures are recorded as rows with an 'error' field."""
    result = AblationResult()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for cell in cells:
        mious = []
        for seed in seeds:
            cfg = replace(base_cfg, mode=cell.mode, threshold=cell.threshold,
                          seed=seed)
            rng = np.random.default_rng(seed * 7919 + 13)
            t0 = time.perf_counter()
            try:
                train_set = corrupt_training_labels(train_samples, cell, rng)
                state, log = trainer.fit(train_set, cfg)
                report = evaluate(state, eval_samples)
                row = {"cell": cell.name, "mode": cell.mode, "seed": seed,
                       "threshold": cell.threshold, "swap_prob": cell.swap_prob,
                       "drop_rate": cell.drop_rate,
                       "miou": report.miou,
                       "train_seconds": time.perf_counter() - t0}
                mious.append(report.miou)
                if out_dir is not None and seed == seeds[0]:
                    _plot_loss_curves(log, os.path.join(
                        out_dir, f"loss_{_slug(cell.name)}.png"))
            except Exception as exc:  # noqa: BLE001 - sweep must survive a bad cell
                row = {"cell": cell.name, "mode": cell.mode, "seed": seed,
                       "threshold": cell.threshold, "swap_prob": cell.swap_prob,
                       "drop_rate": cell.drop_rate, "miou": float("nan"),
                       "train_seconds": time.perf_counter() - t0,
                       "error": f"{type(exc).__name__}: {exc}"}
            result.rows.append(row)
            if progress is not None:
                progress(row)
        summary = {"cell": cell.name, "mode": cell.mode,
                   "threshold": cell.threshold, "swap_prob": cell.swap_prob,
                   "drop_rate": cell.drop_rate, "n_ok": len(mious),
                   "miou_median": float(np.median(mious)) if mious else float("nan")}
        result.summary.append(summary)
    if out_dir is not None:
        _write_csv(os.path.join(out_dir, "runs.csv"), result.rows)
        _write_csv(os.path.join(out_dir, "summary.csv"), result.summary)
        _plot_sweeps(result, out_dir)
    return result


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in name)


def _write_csv(path, rows) -> None:
    if not rows:
        return
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_loss_curves(log, path) -> None:
    plt = _pyplot()
    steps = [e["step"] for e in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("l_weak", "l_dual", "l_proto_f", "l_proto_b", "l_distill", "total"):
        ys = [e[key] for e in log]
        if any(y != 0.0 for y in ys):
            ax.plot(steps, ys, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_sweeps(result: AblationResult, out_dir) -> None:
    plt = _pyplot()
    rows = [r for r in result.summary if np.isfinite(r["miou_median"])]
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["cell"] for r in rows]
    ax.bar(range(len(rows)), [100 * r["miou_median"] for r in rows])
    ax.set_xticks(range(len(rows)), names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("median mIoU (%)")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "summary.png"), dpi=110)
    plt.close(fig)

    for xfield, fname in (("threshold", "threshold_sweep.png"),
                          ("swap_prob", "swap_sweep.png"),
                          ("drop_rate", "drop_sweep.png")):
        pts = sorted({(r[xfield], r["miou_median"]) for r in rows
                      if r["cell"].startswith(xfield.split("_")[0])})
        if len(pts) >= 2:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o")
            ax.set_xlabel(xfield)
            ax.set_ylabel("median mIoU (%)")
            fig.tight_layout()
            fig.savefig(os.path.join(out_dir, fname), dpi=110)
            plt.close(fig)
