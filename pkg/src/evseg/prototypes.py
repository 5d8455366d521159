"""Class prototypes in feature space and the losses built on them.

A prototype is a unit vector summarizing one class in one branch. Per step:
pixel features are L2-normalized, weighted by per-pixel confidence, summed
over the pixels a pseudo-label map assigns to the class, and renormalized
(intra-step). Prototypes enter a bounded FIFO queue per class; the queue mean,
renormalized, is the across-step prototype. In dual-prototype training each
branch's prototype is combined with the opposite branch's projected prototype
before use.

The contrastive term pulls each confident pixel's normalized feature toward
the prototype of the class the *other* branch assigned it, against all other
classes (temperature-scaled dot products). Gradients flow only into the pixel
features; prototypes and assignments act as constants.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .labels import IGNORE

_EPS = 1e-12


@dataclass(frozen=True)
class ClassPrototype:
    vector: np.ndarray
    class_id: int
    source_branch: str

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ValueError("prototype vector must be 1-D")
        if self.source_branch not in ("f", "b"):
            raise ValueError(f"source_branch must be 'f' or 'b', got {self.source_branch!r}")


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """L2-normalize along the last axis, guarding zero rows."""
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norm, _EPS)


def intra_aggregate(z: np.ndarray, confidence: np.ndarray, assignment: np.ndarray,
                    branch: str, min_pixels: int = 1) -> dict[int, ClassPrototype]:
    """Confidence-weighted mean of normalized features per assigned class.

    z: (D, h, w) features; confidence: (h, w); assignment: (h, w) int map with
    IGNORE for unassigned pixels. Classes with fewer than min_pixels
    pixels, or whose weighted sum collapses to zero norm, are omitted.
    """
    d, h, w = z.shape
    if confidence.shape != (h, w) or assignment.shape != (h, w):
        raise ValueError("confidence/assignment shape does not match features")
    flat_z = z.reshape(d, -1).T            # (h*w, D)
    flat_c = confidence.reshape(-1)
    flat_a = assignment.reshape(-1)
    zn = normalize_rows(flat_z)
    out = {}
    for cls in np.unique(flat_a):
        if cls == IGNORE:
            continue
        idx = np.nonzero(flat_a == cls)[0]
        if idx.size < min_pixels:
            continue
        s = (flat_c[idx, None] * zn[idx]).sum(axis=0)
        norm = np.linalg.norm(s)
        if norm < _EPS:
            continue
        out[int(cls)] = ClassPrototype(s / norm, int(cls), branch)
    return out


@dataclass
class PrototypeBank:
    """Per-class FIFO memory of intra-step prototypes for one branch."""

    feature_dim: int
    branch: str
    capacity: int = 32
    queues: dict[int, deque] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def push(self, protos: dict[int, ClassPrototype]) -> None:
        for cls, proto in protos.items():
            if proto.vector.shape != (self.feature_dim,):
                raise ValueError("prototype dimension does not match the bank")
            q = self.queues.setdefault(cls, deque(maxlen=self.capacity))
            q.append(np.asarray(proto.vector, dtype=np.float64).copy())

    def classes(self) -> list[int]:
        return sorted(c for c, q in self.queues.items() if len(q))

    def inter_aggregate(self, class_id: int) -> ClassPrototype:
        """Renormalized queue mean; a zero-norm mean falls back to the most
        recent entry so the result is always a unit vector."""
        q = self.queues.get(class_id)
        if not q:
            raise KeyError(f"no prototypes stored for class {class_id}")
        mean = np.mean(q, axis=0)
        norm = np.linalg.norm(mean)
        if norm < _EPS:
            vec = q[-1].copy()
        else:
            vec = mean / norm
        return ClassPrototype(vec, class_id, self.branch)

    def all_inter(self) -> dict[int, ClassPrototype]:
        return {c: self.inter_aggregate(c) for c in self.classes()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten queues to arrays for checkpointing (FIFO order preserved)."""
        out = {}
        for cls in self.classes():
            out[str(cls)] = np.stack(list(self.queues[cls]))
        return out

    @classmethod
    def from_state(cls, feature_dim: int, branch: str, capacity: int,
                   arrays: dict[str, np.ndarray]) -> "PrototypeBank":
        bank = cls(feature_dim, branch, capacity)
        for key, mat in arrays.items():
            q = deque(maxlen=capacity)
            for row in mat:
                q.append(np.asarray(row, dtype=np.float64).copy())
            bank.queues[int(key)] = q
        return bank


def dual_combine(own: ClassPrototype, delivered: ClassPrototype) -> ClassPrototype:
    """Renormalized sum of a branch's prototype and the projected prototype
    delivered from the other branch. Falls back to the own prototype when the
    sum cancels to zero norm."""
    if own.class_id != delivered.class_id:
        raise ValueError(f"class mismatch: {own.class_id} vs {delivered.class_id}")
    s = own.vector + delivered.vector
    norm = np.linalg.norm(s)
    if norm < _EPS:
        vec = own.vector.copy()
    else:
        vec = s / norm
    return ClassPrototype(vec, own.class_id, own.source_branch)


def _proto_matrix(protos: dict[int, ClassPrototype]):
    classes = sorted(protos)
    mat = np.stack([protos[c].vector for c in classes])
    return classes, mat


def proto_contrast_loss(z: np.ndarray, protos: dict[int, ClassPrototype],
                        targets: np.ndarray, beta: float = 0.1,
                        with_grad: bool = False):
    """Temperature-scaled classification of normalized pixel features against
    the prototype set, with the target class taken from the cross-branch
    assignment map.

    Pixels whose target is IGNORE or has no prototype are skipped.
    Returns (loss, n_pixels) or (loss, n_pixels, dz) with with_grad=True;
    dz only touches the pixel features (prototypes stay constant). A call
    with no usable pixels or fewer than two prototypes returns loss 0.
    """
    d, h, w = z.shape
    if targets.shape != (h, w):
        raise ValueError("target map shape does not match features")
    if len(protos) < 2:
        return (0.0, 0, np.zeros_like(z)) if with_grad else (0.0, 0)
    classes, pmat = _proto_matrix(protos)
    index_of = {c: i for i, c in enumerate(classes)}
    flat_t = targets.reshape(-1)
    usable = np.isin(flat_t, classes) & (flat_t != IGNORE)
    idx = np.nonzero(usable)[0]
    if idx.size == 0:
        return (0.0, 0, np.zeros_like(z)) if with_grad else (0.0, 0)

    flat_z = z.reshape(d, -1).T[idx]                     # (N, D)
    norms = np.maximum(np.linalg.norm(flat_z, axis=1, keepdims=True), _EPS)
    zn = flat_z / norms
    tgt = np.array([index_of[int(c)] for c in flat_t[idx]])

    logits = zn @ pmat.T / beta                          # (N, K)
    logits -= logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1))
    loss = float(np.mean(log_norm - logits[np.arange(idx.size), tgt]))
    if not np.isfinite(loss):
        raise FloatingPointError("prototype contrast loss is not finite")
    if not with_grad:
        return loss, int(idx.size)

    soft = np.exp(logits - log_norm[:, None])
    soft[np.arange(idx.size), tgt] -= 1.0
    dzn = soft @ pmat / (beta * idx.size)                # (N, D)
    # back through the per-pixel normalization
    ddot = (dzn * zn).sum(axis=1, keepdims=True)
    dflat = (dzn - zn * ddot) / norms
    dz = np.zeros((h * w, d), dtype=z.dtype)
    dz[idx] = dflat
    return loss, int(idx.size), dz.T.reshape(d, h, w)


def distill_loss(z_f: np.ndarray, z_b: np.ndarray, pair: dict[str, np.ndarray],
                 with_grad: bool = False):
    """Symmetric mean-L1 between each branch's features and the projection of
    the other branch's features. Gradients flow only into the projection
    parameters; both feature maps act as constants.
    """
    if z_f.shape != z_b.shape:
        raise ValueError("feature maps must share a shape")
    d = z_f.shape[0]
    n = z_f.size
    fb = np.einsum("od,dhw->ohw", pair["f2b_w"], z_f) + pair["f2b_b"][:, None, None]
    bf = np.einsum("od,dhw->ohw", pair["b2f_w"], z_b) + pair["b2f_b"][:, None, None]
    r1 = bf - z_f
    r2 = fb - z_b
    loss = 0.5 * float(np.abs(r1).mean()) + 0.5 * float(np.abs(r2).mean())
    if not np.isfinite(loss):
        raise FloatingPointError("distillation loss is not finite")
    if not with_grad:
        return loss
    s1 = np.sign(r1) * (0.5 / n)
    s2 = np.sign(r2) * (0.5 / n)
    grads = {
        "b2f_w": np.einsum("ohw,dhw->od", s1, z_b),
        "b2f_b": s1.sum(axis=(1, 2)),
        "f2b_w": np.einsum("ohw,dhw->od", s2, z_f),
        "f2b_b": s2.sum(axis=(1, 2)),
    }
    return loss, grads
