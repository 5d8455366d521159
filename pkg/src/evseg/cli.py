"""Command-line entry points: dataset synthesis, training, evaluation,
ablation sweeps, event rendering, and the annotation service."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import annotate, evaluator, events, kernels, labels, synth, trainer
from .network import NetworkConfig


def _cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    made = 0
    idx = 0
    while made < args.count:
        seed = synth.sample_seed_for(args.seed, idx)
        idx += 1
        try:
            sample = synth.make_sample(
                f"sample_{idx - 1:05d}", seed, args.width, args.height,
                args.classes, args.duration_us, args.points_per_class)
        except ValueError:
            continue
        synth.save_sample(sample, os.path.join(args.out, sample.sample_id))
        made += 1
    palette = labels.synthetic_palette(args.classes)
    with open(os.path.join(args.out, "palette.json"), "w", encoding="utf-8") as fh:
        json.dump(labels.palette_to_json(palette), fh, indent=1)
        fh.write("\n")
    print(f"wrote {made} samples to {args.out}")
    return 0


def _cmd_render(args):
    stream = events.read_events(args.events)
    if args.t1 > 0:
        stream = events.slice_window(stream, args.t0, args.t1)
    events.save_frame_png(events.render_frame(stream), args.out)
    print(f"rendered {len(stream)} events to {args.out}")
    return 0


def _infer_class_count(samples) -> int:
    top = 0
    for s in samples:
        vals = s.gt[s.gt != labels.IGNORE]
        if vals.size:
            top = max(top, int(vals.max()))
    return top + 1


def _train_config(args, samples) -> trainer.TrainConfig:
    h, w = samples[0].gt.shape
    classes = args.classes or _infer_class_count(samples)
    net = NetworkConfig(class_count=classes, height=h, width=w, dtype=args.dtype)
    return trainer.TrainConfig(
        mode=args.mode, steps=args.steps, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed, threshold=args.threshold,
        warmup_steps=args.warmup_steps, checkpoint_every=args.checkpoint_every,
        network=net)


def _cmd_train(args):
    samples = synth.load_dataset(args.data)
    if not samples:
        print(f"no samples under {args.data}", file=sys.stderr)
        return 1
    cfg = _train_config(args, samples)
    t0 = time.perf_counter()

    def progress(entry):
        if entry["step"] % args.log_every == 0 or entry["step"] == cfg.steps - 1:
            rate = (entry["step"] + 1) / (time.perf_counter() - t0)
            print(f"step {entry['step']:6d}  total {entry['total']:.4f}  "
                  f"weak {entry['l_weak']:.4f}  dual {entry['l_dual']:.4f}  "
                  f"({rate:.1f} step/s)", flush=True)

    state, _ = trainer.fit(samples, cfg, out_dir=args.out,
                           resume_from=args.resume, progress=progress)
    print(f"finished {state.step} steps; checkpoint in {args.out}")
    return 0


def _cmd_eval(args):
    samples = synth.load_dataset(args.data)
    state = trainer.load_state(args.checkpoint)
    report = evaluator.evaluate(state, samples)
    payload = {"miou": report.miou,
               "per_class_iou": {str(k): v for k, v in report.per_class_iou.items()},
               "n_samples": report.n_samples}
    print(json.dumps(payload, indent=1))
    return 0


def _cmd_ablate(args):
    spec = evaluator.BenchmarkSpec(train_count=args.train_count,
                                   eval_count=args.eval_count,
                                   dataset_seed=args.dataset_seed)
    train_set, eval_set = evaluator.build_benchmark(spec, cache_dir=args.cache)
    base = evaluator.benchmark_train_config(spec, "full", 0, steps=args.steps)
    cells = [evaluator.AblationCell(name=m, mode=m) for m in args.modes.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(row):
        status = f"{row['miou']:.4f}" if np.isfinite(row["miou"]) else row.get("error", "?")
        print(f"[{row['cell']} seed {row['seed']}] miou {status} "
              f"({row['train_seconds']:.1f}s)", flush=True)

    result = evaluator.run_ablation(train_set, eval_set, base, cells, seeds,
                                    out_dir=args.out, progress=progress)
    for row in result.summary:
        print(f"{row['cell']:24s} median mIoU {100 * row['miou_median']:.2f} "
              f"({row['n_ok']} runs)")
    return 0


def _cmd_serve_annotate(args):
    try:
        annotate.serve(args.data, args.host, args.port, args.static)
    except annotate.StoreCorruptError as exc:
        print(f"refusing to start: {exc}", file=sys.stderr)
        return 1
    return 0


def _cmd_backend(args):
    print(f"active kernel backend: {kernels.backend_name()}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="evseg",
        description="weakly supervised event-camera segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--duration-us", type=int, default=200_000)
    p.add_argument("--points-per-class", type=int, default=1)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("render", help="render an event file to PNG")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t0", type=int, default=0)
    p.add_argument("--t1", type=int, default=0, help="0 = full stream")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="full", choices=trainer.MODES)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--classes", type=int, default=0, help="0 = infer from gt")
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against dense gt")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the synthetic ablation benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None, help="dataset cache directory")
    p.add_argument("--modes", default="baseline,dual,full")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--eval-count", type=int, default=50)
    p.add_argument("--dataset-seed", type=int, default=20260815)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("serve-annotate", help="start the annotation service")
    p.add_argument("--data", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--static", default=None, help="frontend build directory")
    p.set_defaults(func=_cmd_serve_annotate)

    p = sub.add_parser("backend", help="print the active kernel backend")
    p.set_defaults(func=_cmd_backend)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
