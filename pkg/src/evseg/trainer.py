"""Training loop for the dual-branch segmentation model.

One model instance holds up to three parameter groups in a flat dict:
"f/..." forward-branch network, "b/..." backward-branch network, and "g/..."
the cross-branch projection pair. Which groups exist and which loss terms are
active depends on the training mode:

  baseline              forward branch, point-label loss only
  self                  + self-training against the branch's own pseudo labels
  ema                   + guidance from an exponential-moving-average teacher
  dual                  two branches + cross-branch consistency
  dual+proto            + prototype contrast (per-branch memory prototypes)
  dual+proto+distill    + feature distillation through the projection pair
  full                  prototype contrast uses cross-branch combined prototypes

Optimization is RAdam over every parameter that received a gradient this
step; parameters outside the active loss paths are never touched.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import events as ev
from . import network, prototypes, supervision
from .network import NetworkConfig
from .supervision import NumericalError

MODES = ("baseline", "self", "ema", "dual", "dual+proto", "dual+proto+distill", "full")
_DUAL_MODES = ("dual", "dual+proto", "dual+proto+distill", "full")
_PROTO_MODES = ("dual+proto", "dual+proto+distill", "full")
_DISTILL_MODES = ("dual+proto+distill", "full")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-3
    seed: int = 0
    lambda_weak: float = 1.0
    lambda_dual: float = 1.0
    lambda_proto: float = 1.0
    lambda_distill: float = 1.0
    threshold: float = 0.5
    beta: float = 0.1
    backward_ratio: int = 5
    warmup_steps: int = 100
    ramp_steps: int = 200
    ema_momentum: float = 0.99
    queue_capacity: int = 32
    grad_clip: float = 0.0
    forward_window_us: int = 0   # 0 = use the full history before the target time
    checkpoint_every: int = 0    # 0 = final checkpoint only
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must be in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.backward_ratio < 1:
            raise ValueError("backward_ratio must be >= 1")
        if not (0.0 <= self.ema_momentum < 1.0):
            raise ValueError("ema_momentum must be in [0, 1)")

    @property
    def uses_backward(self) -> bool:
        return self.mode in _DUAL_MODES

    @property
    def uses_proto(self) -> bool:
        return self.mode in _PROTO_MODES

    @property
    def uses_distill(self) -> bool:
        return self.mode in _DISTILL_MODES

    def ramp(self, step: int) -> float:
        """Weight multiplier for the guidance terms (cross-branch, prototype,
        distillation): 0 during warmup, then a linear ramp to 1. The point
        supervision is always at full weight; early pseudo labels are noise,
        so their influence fades in."""
        if step < self.warmup_steps:
            return 0.0
        if self.ramp_steps <= 0:
            return 1.0
        return min(1.0, (step - self.warmup_steps + 1) / self.ramp_steps)


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["network"] = NetworkConfig(**d["network"])
    return TrainConfig(**d)


# -- optimizer ----------------------------------------------------------------

@dataclass
class RAdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def radam_step(opt: RAdamState, params: dict, grads: dict) -> None:
    """Rectified Adam update, applied only to keys present in grads.

    Each parameter keeps its own step count so terms that activate late
    (after warmup) still get correct bias corrections and the variance
    rectification warms up per parameter.
    """
    rho_inf = 2.0 / (1.0 - opt.beta2) - 1.0
    for key, g in grads.items():
        if key not in opt.m:
            opt.m[key] = np.zeros_like(params[key])
            opt.v[key] = np.zeros_like(params[key])
            opt.t[key] = 0
        opt.t[key] += 1
        t = opt.t[key]
        m = opt.m[key]
        v = opt.v[key]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        bias1 = 1.0 - opt.beta1 ** t
        bias2 = 1.0 - opt.beta2 ** t
        m_hat = m / bias1
        rho_t = rho_inf - 2.0 * t * (opt.beta2 ** t) / bias2
        if rho_t > 4.0:
            v_hat = np.sqrt(v / bias2)
            num = (rho_t - 4.0) * (rho_t - 2.0) * rho_inf
            den = (rho_inf - 4.0) * (rho_inf - 2.0) * rho_t
            rect = float(np.sqrt(num / den))
            params[key] -= opt.lr * rect * m_hat / (v_hat + opt.eps)
        else:
            params[key] -= opt.lr * m_hat


def clip_grads(grads: dict, max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- model state ----------------------------------------------------------------

class TrainerState:
    """Everything that evolves during a run: parameters, optimizer moments,
    prototype memories, the EMA teacher, data order, and the RNG."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        net = cfg.network
        self.params: dict[str, np.ndarray] = {}
        for name, arr in network.init_params(net, seed=cfg.seed).items():
            self.params[f"f/{name}"] = arr
        if cfg.uses_backward:
            for name, arr in network.init_params(net, seed=cfg.seed + 1).items():
                self.params[f"b/{name}"] = arr
        if cfg.uses_distill:
            pair_rng = np.random.default_rng(cfg.seed + 2)
            pair = network.init_projection_pair(net.feature_dim, pair_rng, net.dtype)
            for name, arr in pair.items():
                self.params[f"g/{name}"] = arr
        self.opt = RAdamState(lr=cfg.lr)
        self.bank_f = prototypes.PrototypeBank(net.feature_dim, "f", cfg.queue_capacity)
        self.bank_b = prototypes.PrototypeBank(net.feature_dim, "b", cfg.queue_capacity)
        self.ema_params = (
            {k: v.copy() for k, v in self.params.items() if k.startswith("f/")}
            if cfg.mode == "ema" else None)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def branch_params(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + "/")}

    def next_batch(self, n_samples: int) -> np.ndarray:
        idx = np.empty(self.cfg.batch_size, dtype=np.int64)
        for i in range(self.cfg.batch_size):
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(n_samples)
                self.pos = 0
            idx[i] = self.order[self.pos]
            self.pos += 1
        return idx


# -- input pipeline -------------------------------------------------------------

def _voxel_chunks(stream: ev.EventStream, t0: int, t1: int, cfg: TrainConfig):
    """Voxelize [t0, t1) as recurrent_steps consecutive sub-windows."""
    net = cfg.network
    bounds = np.linspace(t0, t1, net.recurrent_steps + 1).round().astype(np.int64)
    out = []
    zeros = np.zeros((net.in_bins, net.height, net.width), dtype=np.float32)
    for i in range(net.recurrent_steps):
        a, b = int(bounds[i]), int(bounds[i + 1])
        if b <= a:
            out.append(zeros)
            continue
        chunk = ev.slice_window(stream, a, b)
        vox = ev.voxelize(chunk, ev.VoxelizationConfig(
            num_bins=net.in_bins, width=net.width, height=net.height,
            t_start=a, t_end=b))
        out.append(vox.data)
    return out


def build_inputs(sample, cfg: TrainConfig):
    """Voxel sub-window sequences for both branches of one sample.

    Forward: events before the target time, oldest sub-window first.
    Backward: a time-reversed slice of the events after the target time,
    sized relative to the forward count, folded the same way so recurrence
    walks from the far future toward the target time.
    """
    stream = sample.events
    t_ref = int(sample.t_ref)
    t0 = t_ref - cfg.forward_window_us if cfg.forward_window_us > 0 else 0
    t0 = max(0, t0)
    if t_ref <= t0:
        raise ValueError("target time leaves an empty forward window")
    fwd = ev.slice_window(stream, t0, t_ref)
    vox_f = _voxel_chunks(fwd, t0, t_ref, cfg)
    if not cfg.uses_backward:
        return vox_f, None
    sel = ev.select_backward(stream, t_ref, len(fwd.ts), cfg.backward_ratio)
    rev = ev.reverse(sel)
    if len(rev.ts) == 0:
        net = cfg.network
        vox_b = [np.zeros((net.in_bins, net.height, net.width), dtype=np.float32)
                 for _ in range(net.recurrent_steps)]
    else:
        vox_b = _voxel_chunks(rev, int(rev.ts[0]), int(rev.ts[-1]) + 1, cfg)
    return vox_f, vox_b


def _downsample(arr: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor decimation aligned to pixel-block centers."""
    off = stride // 2
    return arr[..., off::stride, off::stride]


# -- the training step ----------------------------------------------------------

_LOG_KEYS = ("l_weak", "l_dual", "l_proto_f", "l_proto_b", "l_distill", "total")


def _check_finite(name: str, value: float, step: int) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"{name} became non-finite at step {step}")
    return value


def _accumulate(total: dict, grads: dict, prefix: str, scale: float = 1.0) -> None:
    for k, g in grads.items():
        key = f"{prefix}/{k}"
        if key in total:
            total[key] += scale * g
        else:
            total[key] = scale * g if scale != 1.0 else g.copy()


def train_step(state: TrainerState, batch: list, cfg: TrainConfig,
               input_cache: dict | None = None) -> dict:
    """One optimizer update on a batch of samples; returns the loss breakdown
    averaged over the batch.

    input_cache, when given, memoizes voxelized inputs across steps (keyed by
    sample identity); inputs depend only on the sample and the fixed config.
    """
    net = cfg.network
    sums = dict.fromkeys(_LOG_KEYS, 0.0)
    grad_total: dict[str, np.ndarray] = {}
    params_f = state.branch_params("f")
    params_b = state.branch_params("b") if cfg.uses_backward else None
    pair = state.branch_params("g") if cfg.uses_distill else None
    ramp = cfg.ramp(state.step)
    proto_on = cfg.uses_proto and ramp > 0.0
    distill_on = cfg.uses_distill and cfg.lambda_distill != 0.0 and ramp > 0.0
    w_dual = ramp * cfg.lambda_dual
    w_proto = ramp * cfg.lambda_proto

    for sample in batch:
        if input_cache is not None:
            cached = input_cache.get(id(sample))
            if cached is None:
                cached = build_inputs(sample, cfg)
                input_cache[id(sample)] = cached
            vox_f, vox_b = cached
        else:
            vox_f, vox_b = build_inputs(sample, cfg)
        st_f = network.forward(vox_f, params_f, net)
        probs_f = supervision.softmax_probs(st_f.logits)
        labels = sample.labels

        dlogits_f = cfg.lambda_weak * supervision.weak_loss_grad(
            probs_f, labels, 2 if cfg.uses_backward else 1)
        dz_f = None

        if cfg.uses_backward:
            st_b = network.forward(vox_b, params_b, net)
            probs_b = supervision.softmax_probs(st_b.logits)
            l_weak = supervision.weak_loss(probs_f, probs_b, labels)
            pgt_f = supervision.pseudo_gt(probs_f, cfg.threshold)
            pgt_b = supervision.pseudo_gt(probs_b, cfg.threshold)
            l_dual = supervision.dual_loss(probs_f, pgt_b, probs_b, pgt_f)
            dlogits_f += w_dual * supervision.dual_loss_grad(probs_f, pgt_b)
            dlogits_b = (cfg.lambda_weak * supervision.weak_loss_grad(probs_b, labels, 2)
                         + w_dual * supervision.dual_loss_grad(probs_b, pgt_f))
            dz_b = None
            sums["l_weak"] += _check_finite("l_weak", l_weak, state.step)
            sums["l_dual"] += _check_finite("l_dual", l_dual, state.step)

            if proto_on:
                s = net.stride
                rel_f = _downsample(supervision.reliability(probs_f), s)
                rel_b = _downsample(supervision.reliability(probs_b), s)
                a_f = _downsample(pgt_f, s)
                a_b = _downsample(pgt_b, s)
                state.bank_f.push(prototypes.intra_aggregate(st_f.z, rel_f, a_f, "f"))
                state.bank_b.push(prototypes.intra_aggregate(st_b.z, rel_b, a_b, "b"))
                inter_f = state.bank_f.all_inter()
                inter_b = state.bank_b.all_inter()
                protos_f, protos_b = inter_f, inter_b
                if cfg.mode == "full":
                    protos_f = _combined(inter_f, inter_b, pair, "b2f")
                    protos_b = _combined(inter_b, inter_f, pair, "f2b")
                l_pf, _, dzp_f = prototypes.proto_contrast_loss(
                    st_f.z, protos_f, a_b, cfg.beta, with_grad=True)
                l_pb, _, dzp_b = prototypes.proto_contrast_loss(
                    st_b.z, protos_b, a_f, cfg.beta, with_grad=True)
                sums["l_proto_f"] += _check_finite("l_proto_f", l_pf, state.step)
                sums["l_proto_b"] += _check_finite("l_proto_b", l_pb, state.step)
                if w_proto != 0.0:
                    dz_f = w_proto * dzp_f
                    dz_b = w_proto * dzp_b

            if distill_on:
                l_dist, pair_grads = prototypes.distill_loss(
                    st_f.z, st_b.z, pair, with_grad=True)
                sums["l_distill"] += _check_finite("l_distill", l_dist, state.step)
                _accumulate(grad_total, pair_grads, "g", ramp * cfg.lambda_distill)

            grads_b = network.backward(st_b, params_b, dlogits_b, dz_b)
            _accumulate(grad_total, grads_b, "b")
        else:
            l_weak = supervision.weak_loss(probs_f, None, labels)
            sums["l_weak"] += _check_finite("l_weak", l_weak, state.step)
            if cfg.mode == "self":
                pgt_self = supervision.pseudo_gt(probs_f, cfg.threshold)
                l_guid = supervision.masked_ce(probs_f, pgt_self)
                dlogits_f += w_dual * supervision.masked_ce_grad(probs_f, pgt_self)
                sums["l_dual"] += _check_finite("l_dual", l_guid, state.step)
            elif cfg.mode == "ema":
                ema = {k[2:]: v for k, v in state.ema_params.items()}
                st_t = network.forward(vox_f, ema, net)
                pgt_t = supervision.pseudo_gt(
                    supervision.softmax_probs(st_t.logits), cfg.threshold)
                l_guid = supervision.masked_ce(probs_f, pgt_t)
                dlogits_f += w_dual * supervision.masked_ce_grad(probs_f, pgt_t)
                sums["l_dual"] += _check_finite("l_dual", l_guid, state.step)

        grads_f = network.backward(st_f, params_f, dlogits_f, dz_f)
        _accumulate(grad_total, grads_f, "f")

    inv = 1.0 / len(batch)
    for g in grad_total.values():
        g *= inv
    if cfg.grad_clip > 0:
        clip_grads(grad_total, cfg.grad_clip)
    radam_step(state.opt, state.params, grad_total)
    if cfg.mode == "ema":
        m = cfg.ema_momentum
        for k, v in state.ema_params.items():
            v *= m
            v += (1.0 - m) * state.params[k]

    breakdown = {k: sums[k] * inv for k in _LOG_KEYS}
    breakdown["total"] = (cfg.lambda_weak * breakdown["l_weak"]
                          + ramp * (cfg.lambda_dual * breakdown["l_dual"]
                                    + cfg.lambda_proto * (breakdown["l_proto_f"]
                                                          + breakdown["l_proto_b"])
                                    + cfg.lambda_distill * breakdown["l_distill"]))
    breakdown["ramp"] = ramp
    return breakdown


def _combined(own: dict, other: dict, pair: dict, direction: str) -> dict:
    """Merge each class prototype with the opposite branch's projected one;
    classes absent from the other branch keep the own prototype."""
    out = {}
    for cls, proto in own.items():
        if cls in other:
            delivered = prototypes.ClassPrototype(
                network.project(pair, other[cls].vector, direction),
                cls, other[cls].source_branch)
            out[cls] = prototypes.dual_combine(proto, delivered)
        else:
            out[cls] = proto
    return out


# -- checkpointing ----------------------------------------------------------------

def save_state(state: TrainerState, path) -> None:
    arrays = {}
    for k, v in state.params.items():
        arrays[f"param/{k}"] = v
    for k, v in state.opt.m.items():
        arrays[f"opt_m/{k}"] = v
        arrays[f"opt_v/{k}"] = state.opt.v[k]
    if state.ema_params is not None:
        for k, v in state.ema_params.items():
            arrays[f"ema/{k}"] = v
    for k, v in state.bank_f.state_arrays().items():
        arrays[f"bank_f/{k}"] = v
    for k, v in state.bank_b.state_arrays().items():
        arrays[f"bank_b/{k}"] = v
    arrays["order"] = state.order
    meta = {
        "step": state.step,
        "pos": state.pos,
        "opt_t": state.opt.t,
        "rng_state": state.rng.bit_generator.state,
        "train_config": config_to_dict(state.cfg),
    }
    network.save_checkpoint(path, arrays, meta)


def load_state(path) -> TrainerState:
    arrays, meta = network.load_checkpoint(path)
    cfg = config_from_dict(meta["train_config"])
    state = TrainerState.__new__(TrainerState)
    state.cfg = cfg
    state.params = {k[len("param/"):]: arrays[k].copy()
                    for k in arrays if k.startswith("param/")}
    state.opt = RAdamState(lr=cfg.lr)
    for k in arrays:
        if k.startswith("opt_m/"):
            name = k[len("opt_m/"):]
            state.opt.m[name] = arrays[k].copy()
            state.opt.v[name] = arrays[f"opt_v/{name}"].copy()
    state.opt.t = {k: int(v) for k, v in meta["opt_t"].items()}
    net = cfg.network
    state.bank_f = prototypes.PrototypeBank.from_state(
        net.feature_dim, "f", cfg.queue_capacity,
        {k[len("bank_f/"):]: arrays[k] for k in arrays if k.startswith("bank_f/")})
    state.bank_b = prototypes.PrototypeBank.from_state(
        net.feature_dim, "b", cfg.queue_capacity,
        {k[len("bank_b/"):]: arrays[k] for k in arrays if k.startswith("bank_b/")})
    state.ema_params = ({k[len("ema/"):]: arrays[k].copy()
                         for k in arrays if k.startswith("ema/")}
                        if cfg.mode == "ema" else None)
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = int(meta["step"])
    state.order = arrays["order"].astype(np.int64)
    state.pos = int(meta["pos"])
    return state


# -- fit / predict ----------------------------------------------------------------

def fit(samples, cfg: TrainConfig, out_dir=None, resume_from=None,
        progress=None):
    """Run the configured number of steps over the sample list.

    Returns (state, log) where log is one breakdown dict per step. With
    out_dir set, breakdowns stream to train_log.jsonl and checkpoints land
    next to it; resume_from restores a checkpoint and continues as if the
    run had never stopped (same batches, same RNG draws).
    """
    if len(samples) == 0:
        raise ValueError("cannot fit on an empty sample list")
    if resume_from is not None:
        state = load_state(resume_from)
        if config_to_dict(state.cfg) != config_to_dict(cfg):
            raise ValueError("resume checkpoint was produced with a different config")
    else:
        state = TrainerState(cfg)
    log = []
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        if resume_from is None and os.path.exists(log_path):
            os.remove(log_path)

    input_cache: dict = {}
    while state.step < cfg.steps:
        idx = state.next_batch(len(samples))
        batch = [samples[int(i)] for i in idx]
        breakdown = train_step(state, batch, cfg, input_cache)
        entry = {"step": state.step, **breakdown, "lr": cfg.lr}
        log.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        state.step += 1
        if progress is not None:
            progress(entry)
        if (out_dir is not None and cfg.checkpoint_every > 0
                and state.step % cfg.checkpoint_every == 0
                and state.step < cfg.steps):
            save_state(state, os.path.join(out_dir, f"checkpoint_{state.step:06d}.npz"))
    if out_dir is not None:
        save_state(state, os.path.join(out_dir, "checkpoint_final.npz"))
    return state, log


def predict(state: TrainerState, sample) -> np.ndarray:
    """Argmax segmentation from the forward branch at the sample's target time."""
    cfg = state.cfg
    vox_f, _ = build_inputs(sample, _forward_only(cfg))
    st = network.forward(vox_f, state.branch_params("f"), cfg.network)
    return st.logits.argmax(axis=0).astype(np.uint8)


def predict_probs(state: TrainerState, sample) -> np.ndarray:
    cfg = state.cfg
    vox_f, _ = build_inputs(sample, _forward_only(cfg))
    st = network.forward(vox_f, state.branch_params("f"), cfg.network)
    return supervision.softmax_probs(st.logits)


def _forward_only(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, mode="baseline") if cfg.uses_backward else cfg
