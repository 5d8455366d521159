"""Loss terms built on sparse point labels and cross-branch pseudo labels.

All functions take/return plain numpy arrays. Probabilities are computed
once per branch via softmax_probs; loss helpers come in pairs (value,
gradient-with-respect-to-logits) so the training loop can assemble the head
gradient without an autodiff framework. The fused softmax-cross-entropy
gradient (p - onehot) is exact even where log-probabilities were clamped.
"""

from __future__ import annotations

import warnings

import numpy as np

from .labels import IGNORE, PointLabelSet


class NumericalError(RuntimeError):
    """A loss or gradient turned non-finite."""


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Channelwise softmax of a (C, H, W) logit map, max-subtracted."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _log_probs(probs: np.ndarray) -> np.ndarray:
    tiny = np.finfo(probs.dtype).tiny
    return np.log(np.maximum(probs, tiny))


def _check_points(labels: PointLabelSet, probs: np.ndarray) -> None:
    c, h, w = probs.shape
    for p in labels.points:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise ValueError(f"labeled point ({p.x}, {p.y}) outside {w}x{h} map")
        if not (0 <= p.class_id < c):
            raise ValueError(f"labeled class {p.class_id} outside [0, {c})")


def weak_loss(probs_f: np.ndarray, probs_b, labels: PointLabelSet) -> float:
    """Mean negative log-likelihood of the labeled points.

    With two branches the mean runs over both branches' predictions at every
    point (denominator 2 * n_points); pass probs_b=None for single-branch
    training (denominator n_points).
    """
    _check_points(labels, probs_f)
    if len(labels.points) == 0:
        warnings.warn("weak_loss called with an empty label set", stacklevel=2)
        return 0.0
    logp_f = _log_probs(probs_f)
    total = 0.0
    n_terms = 0
    for p in labels.points:
        total -= float(logp_f[p.class_id, p.y, p.x])
        n_terms += 1
    if probs_b is not None:
        logp_b = _log_probs(probs_b)
        for p in labels.points:
            total -= float(logp_b[p.class_id, p.y, p.x])
            n_terms += 1
    loss = total / n_terms
    if not np.isfinite(loss):
        raise NumericalError("weak_loss is not finite")
    return loss


def weak_loss_grad(probs: np.ndarray, labels: PointLabelSet, n_branches: int) -> np.ndarray:
    """d weak_loss / d logits for one branch (softmax-CE fused form)."""
    dlogits = np.zeros_like(probs)
    n = len(labels.points)
    if n == 0:
        return dlogits
    scale = 1.0 / (n_branches * n)
    for p in labels.points:
        dlogits[:, p.y, p.x] += probs[:, p.y, p.x] * scale
        dlogits[p.class_id, p.y, p.x] -= scale
    return dlogits


def reliability(probs: np.ndarray) -> np.ndarray:
    """Per-pixel confidence: the maximum softmax probability."""
    return probs.max(axis=0)


def pseudo_gt(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Argmax where confidence exceeds the threshold, IGNORE elsewhere.

    Ties resolve to the lowest class index (argmax keeps the first maximum).
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    conf = probs.max(axis=0)
    out = probs.argmax(axis=0).astype(np.int64)
    out[conf <= threshold] = IGNORE
    return out


def masked_ce(probs: np.ndarray, target: np.ndarray) -> float:
    """Cross-entropy against an integer map, averaged over non-ignored pixels."""
    mask = target != IGNORE
    if not mask.any():
        return 0.0
    logp = _log_probs(probs)
    ys, xs = np.nonzero(mask)
    picked = logp[target[mask].astype(np.int64), ys, xs]
    loss = float(-picked.mean())
    if not np.isfinite(loss):
        raise NumericalError("masked cross-entropy is not finite")
    return loss


def masked_ce_grad(probs: np.ndarray, target: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """d masked_ce / d logits, times scale. No gradient flows to the target."""
    dlogits = np.zeros_like(probs)
    mask = target != IGNORE
    m = int(np.count_nonzero(mask))
    if m == 0:
        return dlogits
    ys, xs = np.nonzero(mask)
    cls = target[mask].astype(np.int64)
    w = scale / m
    dlogits[:, ys, xs] = probs[:, ys, xs] * w
    dlogits[cls, ys, xs] -= w
    return dlogits


def dual_loss(probs_f: np.ndarray, pseudo_b: np.ndarray,
              probs_b: np.ndarray, pseudo_f: np.ndarray) -> float:
    """Symmetric cross-branch consistency: each branch's probabilities are
    scored against the other branch's pseudo labels, halved and summed.
    Pseudo labels act as constants; pixels ignored in a pseudo map contribute
    nothing to that term."""
    return 0.5 * masked_ce(probs_f, pseudo_b) + 0.5 * masked_ce(probs_b, pseudo_f)


def dual_loss_grad(probs: np.ndarray, pseudo_other: np.ndarray) -> np.ndarray:
    """d dual_loss / d logits of one branch (the 0.5-weighted CE term)."""
    return masked_ce_grad(probs, pseudo_other, scale=0.5)
