"""Attention-guided region proposals.

Support features are pooled into one class-attentive vector per class; each
vector reweights the query map channel-wise; a single RPN head scores every
reweighted map; the per-class objectness of each anchor is softmax-normalized
into a class-aware confidence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import boxes as bx
from .autograd import Tensor, as_tensor
from .config import ModelConfig
from .kernels import nms


def rpn_specs(cfg: ModelConfig):
    C, A = cfg.channels, cfg.num_anchors
    yield "rpn.conv.w", (3, 3, C, C), ("he", 9 * C), "rpn"
    yield "rpn.conv.b", (C,), ("zeros",), "rpn"
    yield "rpn.obj.w", (C, A), ("normal", 0.01), "rpn"
    yield "rpn.obj.b", (A,), ("zeros",), "rpn"
    yield "rpn.delta.w", (C, 4 * A), ("normal", 0.01), "rpn"
    yield "rpn.delta.b", (4 * A,), ("zeros",), "rpn"


def _gap(fm):
    fm = as_tensor(fm)
    if fm.ndim != 3:
        raise ValueError(f"expected an (H, W, C) feature map, got shape {fm.shape}")
    return ag.mean(fm, (0, 1))


def class_attentive_vectors(support_features) -> Tensor:
    """a_n = (1/K) sum_k GAP(F_n^k); returns an (N, C) tensor.

    ``support_features[n]`` is a list of (H, W, C) maps (sizes may differ
    between shots) or a (K, H, W, C) tensor.
    """
    if len(support_features) == 0:
        raise ValueError("no support classes")
    vecs, C = [], None
    for n, shots in enumerate(support_features):
        if isinstance(shots, Tensor) and shots.ndim == 4:
            if shots.shape[0] == 0:
                raise ValueError(f"class slot {n} has no support shots")
            pooled = ag.mean(shots, (1, 2))
        else:
            if len(shots) == 0:
                raise ValueError(f"class slot {n} has no support shots")
            pooled = ag.stack([_gap(s) for s in shots])
        if C is None:
            C = pooled.shape[-1]
        elif pooled.shape[-1] != C:
            raise ValueError(f"class slot {n} has {pooled.shape[-1]} channels, expected {C}")
        vecs.append(ag.sorted_mean(pooled, 0))
    return ag.stack(vecs)


def reweight(Y, a) -> Tensor:
    """Channel-wise product of a query map with attentive vector(s).

    ``Y`` (H, W, C) with ``a`` (C,) gives (H, W, C); with ``a`` (N, C) gives
    (N, H, W, C), one map per class.
    """
    Y, a = as_tensor(Y), as_tensor(a)
    if Y.shape[-1] != a.shape[-1]:
        raise ValueError(f"channel mismatch: map has {Y.shape[-1]}, vector has {a.shape[-1]}")
    if a.ndim == 1:
        return Y * a
    if Y.ndim != 3:
        raise ValueError("per-class reweighting expects a single (H, W, C) map")
    N, C = a.shape
    return ag.reshape(Y, (1,) + Y.shape) * ag.reshape(a, (N, 1, 1, C))


def rpn_heads(Yt, params):
    """Shared RPN head over (N, H, W, C) maps -> objectness (N, H, W, A), deltas (N, H, W, A, 4)."""
    Yt = as_tensor(Yt)
    if Yt.ndim == 3:
        Yt = ag.reshape(Yt, (1,) + Yt.shape)
    N, H, W, _ = Yt.shape
    h = ag.relu(ag.conv2d(Yt, params["rpn.conv.w"], params["rpn.conv.b"]))
    obj = ag.linear(h, params["rpn.obj.w"], params["rpn.obj.b"])
    A = obj.shape[-1]
    deltas = ag.reshape(ag.linear(h, params["rpn.delta.w"], params["rpn.delta.b"]), (N, H, W, A, 4))
    return obj, deltas


def aggregate_class_aware(scores):
    """Softmax over the last axis (the N per-class objectness scores of an anchor)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[-1] < 1:
        raise ValueError("need at least one class score")
    if not np.all(np.isfinite(s)):
        raise ag.NonFiniteError("non-finite objectness score")
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Proposal:
    box: tuple
    confidence: np.ndarray  # length N, sums to 1
    top_class: int
    score: float  # ranking score used for thresholding order and NMS


def select_proposals(anchors, confidences, deltas, score_thresh, nms_iou, max_out,
                     image_shape=None, objectness=None, pre_nms_top=None,
                     box_weights=(1.0, 1.0, 1.0, 1.0)):
    """Threshold, refine with the top slot's deltas, clip and NMS.

    Candidates are anchors whose top confidence reaches ``score_thresh``.
    With ``objectness`` (M, N) logits given, candidates are ranked by
    top-confidence times the sigmoid of the top slot's logit; otherwise by
    top confidence alone.  For N = 1 the confidence is identically 1, so the
    objectness term is what orders proposals.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if anchors.shape[0] == 0:
        return []
    conf = np.asarray(confidences, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64).reshape(conf.shape + (4,))
    top = np.argmax(conf, axis=1)
    rows = np.arange(conf.shape[0])
    cand = conf[rows, top]
    rank = cand.copy()
    if objectness is not None:
        obj = np.asarray(objectness, dtype=np.float64).reshape(conf.shape)
        rank = cand * ag.sigmoid_np(obj[rows, top])
    keep = np.flatnonzero(cand >= score_thresh - 1e-12)
    if pre_nms_top is not None and keep.size > pre_nms_top:
        order = np.argsort(-rank[keep], kind="stable")[:pre_nms_top]
        keep = keep[order]
    boxes = bx.decode(d[keep, top[keep]], anchors[keep], box_weights)
    if image_shape is not None:
        boxes = bx.clip_boxes(boxes, image_shape[0], image_shape[1])
    ok = bx.valid_boxes(boxes)
    keep, boxes = keep[ok], boxes[ok]
    kept = nms(boxes, rank[keep], nms_iou)[:max_out]
    return [Proposal(tuple(boxes[i]), conf[keep[i]].copy(), int(top[keep[i]]), float(rank[keep[i]]))
            for i in kept]


def proposals_to_arrays(proposals, n_way=None):
    if not proposals:
        return np.zeros((0, 4)), np.zeros((0, n_way or 0)), np.zeros(0)
    return (np.array([p.box for p in proposals]), np.stack([p.confidence for p in proposals]),
            np.array([p.score for p in proposals]))


def write_proposals_csv(path, proposals):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        n = len(proposals[0].confidence) if proposals else 0
        w.writerow(["x1", "y1", "x2", "y2"] + [f"conf_{i + 1}" for i in range(n)])
        for p in proposals:
            w.writerow([f"{v:.3f}" for v in p.box] + [f"{c:.6f}" for c in p.confidence])


# ---------------------------------------------------------------------------
# training loss


def rpn_loss(obj, deltas, targets, guided=True):
    """Objectness/softmax + box losses given assigned anchor targets.

    ``obj`` is (S, H, W, A) with S = N slots (guided) or 1; ``targets`` holds
    ``labels`` (M,) with slot >= 0 positive, -1 negative, -2 ignore;
    ``sampled`` indices; ``box_targets`` (M, 4).

    Positives get an N-way cross-entropy toward their slot plus a binary
    objectness term on that slot's logit; negatives get a binary term that
    pushes the largest slot logit down, since the N-way softmax has no
    background entry.
    """
    S = obj.shape[0]
    M = int(np.prod(obj.shape[1:]))
    logits = ag.transpose(ag.reshape(obj, (S, M)), (1, 0))  # (M, S)
    dl = ag.transpose(ag.reshape(deltas, (S, M, 4)), (1, 0, 2))  # (M, S, 4)
    labels = targets["labels"]
    sampled = targets["sampled"]
    n_s = max(len(sampled), 1)
    pos = sampled[labels[sampled] >= 0]
    neg = sampled[labels[sampled] == -1]
    zero = Tensor(np.zeros((), dtype=obj.dtype))
    cls = zero
    if guided:
        pos_slot = labels[pos]
        if len(pos):
            if S > 1:
                cls = cls + ag.softmax_cross_entropy(logits[pos], pos_slot) * (len(pos) / n_s)
            cls = cls + ag.bce_with_logits(logits[pos, pos_slot], np.ones(len(pos)), "sum") * (1.0 / n_s)
        if len(neg):
            top = np.argmax(logits.data[neg], axis=1)
            cls = cls + ag.bce_with_logits(logits[neg, top], np.zeros(len(neg)), "sum") * (1.0 / n_s)
    else:
        pos_slot = np.zeros(len(pos), dtype=np.int64)
        idx = np.concatenate([pos, neg])
        t = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        if len(idx):
            cls = ag.bce_with_logits(logits[idx, np.zeros(len(idx), dtype=np.int64)], t, "sum") * (1.0 / n_s)
    reg = zero
    if len(pos):
        diff = dl[pos, pos_slot] - targets["box_targets"][pos].astype(obj.dtype)
        reg = ag.smooth_l1(diff) * (1.0 / n_s)
    return cls, reg
