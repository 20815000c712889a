"""Relation-guided classification and box regression with background rejection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .config import GUIDED, ModelConfig


def detector_specs(cfg: ModelConfig):
    C, F = cfg.channels, cfg.fc_hidden
    guided = cfg.rg_det == GUIDED
    cin = 2 * C if guided else C
    n_out = 2 if guided else cfg.n_way + 1
    yield "det.shared.w", (3, 3, cin, C), ("he", 9 * cin), "heads"
    yield "det.shared.b", (C,), ("zeros",), "heads"
    for name in ("cls1", "cls2"):
        yield f"det.{name}.w", (3, 3, C, C), ("he", 9 * C), "heads"
        yield f"det.{name}.b", (C,), ("zeros",), "heads"
    yield "det.cls_fc1.w", (C, F), ("he", C), "heads"
    yield "det.cls_fc1.b", (F,), ("zeros",), "heads"
    yield "det.cls_fc2.w", (F, n_out), ("normal", 0.01), "heads"
    yield "det.cls_fc2.b", (n_out,), ("zeros",), "heads"
    yield "det.reg_fc1.w", (C, F), ("he", C), "heads"
    yield "det.reg_fc1.b", (F,), ("zeros",), "heads"
    yield "det.reg_fc2.w", (F, 4), ("normal", 0.001), "heads"
    yield "det.reg_fc2.b", (4,), ("zeros",), "heads"


def average_support_features(aligned) -> Tensor:
    """Element-wise mean over the K aligned support maps of one class."""
    if isinstance(aligned, Tensor) and aligned.ndim == 4:
        stack = aligned
    else:
        if len(aligned) == 0:
            raise ValueError("no aligned support features to average")
        shapes = {tuple(np.shape(a.data if isinstance(a, Tensor) else a)) for a in aligned}
        if len(shapes) != 1:
            raise ValueError(f"aligned support features differ in shape: {sorted(shapes)}")
        stack = ag.stack([as_tensor(a) for a in aligned])
    if stack.shape[0] == 0:
        raise ValueError("no aligned support features to average")
    return ag.sorted_mean(stack, 0)


def _cls_tower(shared, params):
    h = ag.relu(ag.conv2d(shared, params["det.cls1.w"], params["det.cls1.b"]))
    h = ag.relu(ag.conv2d(h, params["det.cls2.w"], params["det.cls2.b"]))
    h = ag.mean(h, (1, 2))
    h = ag.relu(ag.linear(h, params["det.cls_fc1.w"], params["det.cls_fc1.b"]))
    return ag.linear(h, params["det.cls_fc2.w"], params["det.cls_fc2.b"])


def relation_scores(z, class_reps, params):
    """Doublets (R, N, 2) = (c+, c-) and the post-first-conv features (R, N, h, w, C).

    Every (RoI, class) pair runs through the same relation network on the
    channel concatenation [z_j, F_n].
    """
    z, reps = as_tensor(z), as_tensor(class_reps)
    single = z.ndim == 3
    if single:
        z = ag.reshape(z, (1,) + z.shape)
    if reps.ndim != 4 or z.shape[1:] != reps.shape[1:]:
        raise ValueError(f"RoI features {z.shape[1:]} and class representatives {reps.shape[1:]} differ")
    R, N = z.shape[0], reps.shape[0]
    h, w, C = z.shape[1:]
    zi = ag.getitem(z, np.repeat(np.arange(R), N))
    fi = ag.getitem(reps, np.tile(np.arange(N), R))
    pair = ag.concat([zi, fi], axis=-1)
    shared = ag.relu(ag.conv2d(pair, params["det.shared.w"], params["det.shared.b"]))
    doublets = ag.reshape(_cls_tower(shared, params), (R, N, 2))
    shared = ag.reshape(shared, (R, N, h, w, C))
    if single:
        return doublets[0], shared[0]
    return doublets, shared


@dataclass
class MatchingVector:
    logits: Tensor  # (..., N+1); last slot is background
    probabilities: np.ndarray
    best: np.ndarray  # i* per RoI, the best-matched class

    @property
    def predicted(self):
        return np.argmax(self.probabilities, axis=-1)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def background_rejection(doublets, best=None) -> MatchingVector:
    """c_i = c_i^+ (i <= N); c_{N+1} = c_{i*}^- with i* = argmax_i c_i^+.

    Ties in c^+ resolve to the lowest index.  ``best`` freezes i* (used by
    gradient audits so the branch choice cannot flip under perturbation).
    """
    d = as_tensor(doublets)
    single = d.ndim == 2
    if single:
        d = ag.reshape(d, (1,) + d.shape)
    if not np.all(np.isfinite(d.data)):
        raise ag.NonFiniteError("non-finite matching score")
    R, N = d.shape[:2]
    pos = d[:, :, 0]
    if best is None:
        best = np.argmax(pos.data, axis=1)
    best = np.asarray(best, dtype=np.int64).reshape(R)
    neg = ag.reshape(d[np.arange(R), best, 1], (R, 1))
    logits = ag.concat([pos, neg], axis=1)
    probs = _softmax(logits.data.astype(np.float64))
    if single:
        return MatchingVector(logits[0], probs[0], best[0])
    return MatchingVector(logits, probs, best)


def regress_box(shared, params) -> Tensor:
    """Separate regression MLP on pooled shared features: (R, N, 4) deltas."""
    shared = as_tensor(shared)
    h = ag.mean(shared, (-3, -2))
    h = ag.relu(ag.linear(h, params["det.reg_fc1.w"], params["det.reg_fc1.b"]))
    return ag.linear(h, params["det.reg_fc2.w"], params["det.reg_fc2.b"])


def unguided_scores(z, params, n_way):
    """Plain classifier over z_j: (R, N+1) logits and (R, N, 4) class-agnostic deltas."""
    z = as_tensor(z)
    shared = ag.relu(ag.conv2d(z, params["det.shared.w"], params["det.shared.b"]))
    logits = _cls_tower(shared, params)
    if logits.shape[1] != n_way + 1:
        raise ValueError(f"unguided classifier has {logits.shape[1] - 1} classes, episode has {n_way}")
    deltas = regress_box(shared, params)
    R = deltas.shape[0]
    deltas = ag.getitem(ag.reshape(deltas, (R, 1, 4)), (slice(None), np.zeros(n_way, dtype=np.int64)))
    return logits, deltas


def detection_loss(logits, deltas, labels, box_targets):
    """Cross-entropy over (N+1) slots and smooth-L1 on the labeled slot's deltas."""
    R, K = logits.shape
    N = K - 1
    cls = ag.softmax_cross_entropy(logits, labels)
    fg = np.flatnonzero(labels < N)
    if fg.size == 0:
        return cls, Tensor(np.zeros((), dtype=logits.dtype))
    diff = deltas[fg, labels[fg]] - np.asarray(box_targets)[fg].astype(logits.dtype)
    return cls, ag.smooth_l1(diff, beta=1.0) * (1.0 / R)
