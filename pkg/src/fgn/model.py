"""End-to-end assembly: episode tensors, training losses and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import boxes as bx
from .attention_mask_head import mask_attentive_bank, mask_fcn, mask_loss, predict_mask
from .autograd import Tensor
from .backbone import ModelParameters, forward_backbone, is_guided, normalize_image, pad_to_stride
from .config import ProposalConfig
from .dataset.sampling import resize_support
from .dataset.types import Episode
from .guidance_rpn import (
    aggregate_class_aware,
    class_attentive_vectors,
    reweight,
    rpn_heads,
    rpn_loss,
    select_proposals,
)
from .kernels import nms
from .relation_detector import (
    average_support_features,
    background_rejection,
    detection_loss,
    regress_box,
    relation_scores,
    unguided_scores,
)
from .roi_ops import align_masks, roi_align
from .targets import assign_rois, assign_rpn

LOSS_NAMES = ("rpn_cls", "rpn_reg", "det_cls", "det_reg", "mask")


@dataclass
class EpisodeBatch:
    query: np.ndarray  # (1, H, W, 3) normalized, padded to the stride
    image_shape: tuple  # unpadded (H, W)
    support: np.ndarray  # (N*K, S, S, 3) normalized
    support_masks: np.ndarray  # (N*K, S, S) bool
    support_boxes: np.ndarray  # (N*K, 4) instance boxes in resized-patch pixels
    n_way: int
    k_shot: int
    gt_boxes: np.ndarray
    gt_slots: np.ndarray
    gt_masks: np.ndarray  # (G, Hp, Wp) bool, padded like the query


def prepare_episode(episode: Episode, params: ModelParameters) -> EpisodeBatch:
    cfg = params.config
    dtype = np.dtype(cfg.dtype)
    H, W = episode.query.shape[:2]
    q = pad_to_stride(episode.query, cfg.stride)
    imgs, masks, boxes = [], [], []
    for shots in episode.support:
        for s in shots:
            im, m, b = resize_support(s, cfg.support_size)
            imgs.append(im)
            masks.append(m)
            boxes.append(b)
    gb, gs, gm = episode.truth_arrays()
    if gm.shape[0]:
        gm = pad_to_stride(gm.transpose(1, 2, 0), cfg.stride).transpose(2, 0, 1)
    return EpisodeBatch(
        query=normalize_image(q, dtype)[None], image_shape=(H, W),
        support=normalize_image(np.stack(imgs), dtype), support_masks=np.stack(masks),
        support_boxes=np.array(boxes, dtype=np.float64),
        n_way=episode.n_way, k_shot=episode.k_shot, gt_boxes=gb, gt_slots=gs, gt_masks=gm,
    )


@dataclass
class Features:
    Y: Tensor  # (h, w, C)
    F: Tensor  # (N*K, s, s, C)
    obj: Tensor
    deltas: Tensor
    anchors: np.ndarray
    attentive: Tensor | None = None


def anchors_for(params, Y):
    cfg = params.config
    return bx.generate_anchors(Y.shape[0], Y.shape[1], cfg.stride, cfg.anchor_scales, cfg.anchor_aspects)


def forward_features(params: ModelParameters, batch: EpisodeBatch, bn_mode="eval") -> Features:
    """Shared backbone on query and supports, then the (guided) RPN head."""
    cfg = params.config
    Y = forward_backbone(Tensor(batch.query), params, bn_mode)[0]
    F = forward_backbone(Tensor(batch.support), params, bn_mode)
    N, K = batch.n_way, batch.k_shot
    a = None
    if is_guided(cfg, "ag_rpn"):
        a = class_attentive_vectors([F[n * K:(n + 1) * K] for n in range(N)])
        obj, deltas = rpn_heads(reweight(Y, a), params)
    else:
        obj, deltas = rpn_heads(Y, params)
    return Features(Y, F, obj, deltas, anchors_for(params, Y), a)


def rpn_outputs(feats: Features, n_way):
    """Per-anchor confidences (M, N), objectness logits (M, N) and deltas (M, N, 4)."""
    S = feats.obj.shape[0]
    M = feats.anchors.shape[0]
    logits = feats.obj.data.reshape(S, M).T
    deltas = feats.deltas.data.reshape(S, M, 4).transpose(1, 0, 2)
    if S == n_way:
        return aggregate_class_aware(logits), logits, deltas
    conf = np.full((M, n_way), 1.0 / n_way)
    return conf, np.repeat(logits, n_way, axis=1), np.repeat(deltas, n_way, axis=1)


def propose(feats: Features, batch: EpisodeBatch, pcfg: ProposalConfig, training: bool):
    conf, logits, deltas = rpn_outputs(feats, batch.n_way)
    thresh = pcfg.score_thresh if pcfg.score_thresh is not None else 1.0 / batch.n_way
    return select_proposals(
        feats.anchors, conf, deltas, thresh, pcfg.nms_iou,
        pcfg.post_nms_train if training else pcfg.post_nms_eval,
        image_shape=batch.image_shape, objectness=logits,
        pre_nms_top=pcfg.pre_nms_train if training else pcfg.pre_nms_eval,
        box_weights=pcfg.rpn_box_weights)


def support_aligned(params, feats: Features, batch: EpisodeBatch, res):
    """Per-shot RoIAlign of support maps at their instance boxes: (N*K, res, res, C)."""
    cfg = params.config
    outs = [roi_align(feats.F[i], batch.support_boxes[i], res, res, cfg.stride, cfg.sampling_ratio)
            for i in range(batch.support.shape[0])]
    return ag.stack(outs)


def support_masks_aligned(params, batch: EpisodeBatch, res):
    return [align_masks(batch.support_masks[i], batch.support_boxes[i], res, params.config.sampling_ratio)[0]
            for i in range(batch.support.shape[0])]


def class_representatives(aligned, N, K):
    return ag.stack([average_support_features(aligned[n * K:(n + 1) * K]) for n in range(N)])


def mask_bank(params, feats, batch):
    cfg = params.config
    N, K = batch.n_way, batch.k_shot
    al = support_aligned(params, feats, batch, cfg.mask_resolution)
    ms = support_masks_aligned(params, batch, cfg.mask_resolution)
    return mask_attentive_bank([[al[n * K + k] for k in range(K)] for n in range(N)],
                               [ms[n * K:(n + 1) * K] for n in range(N)])


def classify_rois(params, feats, batch, rois, best=None):
    """(N+1) logits Tensor, (R, N, 4) deltas Tensor, i* per RoI (guided only)."""
    cfg = params.config
    N, K = batch.n_way, batch.k_shot
    z = roi_align(feats.Y, rois, cfg.det_resolution, cfg.det_resolution, cfg.stride, cfg.sampling_ratio)
    if is_guided(cfg, "rg_det"):
        reps = class_representatives(support_aligned(params, feats, batch, cfg.det_resolution), N, K)
        doublets, shared = relation_scores(z, reps, params)
        mv = background_rejection(doublets, best)
        return mv.logits, regress_box(shared, params), mv.best
    logits, deltas = unguided_scores(z, params, N)
    return logits, deltas, None


def mask_logits(params, feats, batch, rois, slots, bank=None):
    cfg = params.config
    z = roi_align(feats.Y, rois, cfg.mask_resolution, cfg.mask_resolution, cfg.stride, cfg.sampling_ratio)
    if is_guided(cfg, "ag_fcn"):
        bank = bank or mask_bank(params, feats, batch)
        b = ag.getitem(bank.vectors, np.asarray(slots, dtype=np.int64))
        return predict_mask(z, b, params)
    return mask_fcn(z, params)


# ---------------------------------------------------------------------------
# training


@dataclass
class Plan:
    """Frozen non-differentiable decisions for one forward pass."""
    rpn: object
    rois: object
    best: np.ndarray | None = None
    num_proposals: int = 0


def make_plan(feats: Features, batch: EpisodeBatch, pcfg: ProposalConfig, mask_size, rng) -> Plan:
    rpn_t = assign_rpn(feats.anchors, batch.gt_boxes, batch.gt_slots, pcfg, rng)
    props = propose(feats, batch, pcfg, training=True)
    pboxes = np.array([p.box for p in props]).reshape(-1, 4)
    roi_t = assign_rois(pboxes, batch.gt_boxes, batch.gt_slots, batch.gt_masks, batch.n_way,
                        pcfg, mask_size, rng)
    return Plan(rpn_t, roi_t, num_proposals=len(props))


def forward_losses(params: ModelParameters, batch: EpisodeBatch, pcfg: ProposalConfig, rng=None,
                   plan: Plan | None = None, bn_mode="train", freeze_best=False):
    """Loss tensors for one episode; returns (dict name -> Tensor, plan)."""
    cfg = params.config
    feats = forward_features(params, batch, bn_mode)
    if plan is None:
        plan = make_plan(feats, batch, pcfg, cfg.mask_size, rng)
    rpn_cls, rpn_reg = rpn_loss(feats.obj, feats.deltas, plan.rpn.as_dict(), guided=is_guided(cfg, "ag_rpn"))
    roi = plan.rois
    logits, deltas, best = classify_rois(params, feats, batch, roi.boxes, plan.best if freeze_best else None)
    if freeze_best and plan.best is None:
        plan.best = best
    det_cls, det_reg = detection_loss(logits, deltas, roi.labels, roi.box_targets)
    fg = roi.fg
    if fg.size:
        ml = mask_logits(params, feats, batch, roi.boxes[fg], roi.labels[fg])
        mloss = mask_loss(ml, roi.mask_targets)
    else:
        mloss = Tensor(np.zeros((), dtype=np.dtype(cfg.dtype)))
    losses = dict(zip(LOSS_NAMES, (rpn_cls, rpn_reg, det_cls, det_reg, mloss)))
    return losses, plan


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    proposals: list
    boxes: np.ndarray  # (D, 4)
    slots: np.ndarray  # (D,)
    scores: np.ndarray  # (D,)
    masks: np.ndarray  # (D, H, W) bool
    probabilities: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def paste_mask(prob, box, height, width, thresh=0.5):
    """Bilinearly resample an (M, M) map into ``box`` on an (H, W) canvas."""
    M = prob.shape[0]
    x1, y1, x2, y2 = box
    out = np.zeros((height, width), dtype=bool)
    c0, c1 = max(0, int(np.floor(x1))), min(width, int(np.ceil(x2)))
    r0, r1 = max(0, int(np.floor(y1))), min(height, int(np.ceil(y2)))
    if c1 <= c0 or r1 <= r0:
        return out
    u = np.clip((np.arange(c0, c1) + 0.5 - x1) / (x2 - x1) * M - 0.5, 0, M - 1)
    v = np.clip((np.arange(r0, r1) + 0.5 - y1) / (y2 - y1) * M - 0.5, 0, M - 1)
    ua, va = np.floor(u).astype(int), np.floor(v).astype(int)
    ub, vb = np.minimum(ua + 1, M - 1), np.minimum(va + 1, M - 1)
    fu, fv = (u - ua)[None, :], (v - va)[:, None]
    val = ((1 - fv) * (1 - fu) * prob[va][:, ua] + (1 - fv) * fu * prob[va][:, ub]
           + fv * (1 - fu) * prob[vb][:, ua] + fv * fu * prob[vb][:, ub])
    out[r0:r1, c0:c1] = val >= thresh
    return out


def predict(params: ModelParameters, episode_or_batch, pcfg: ProposalConfig) -> Prediction:
    cfg = params.config
    batch = episode_or_batch if isinstance(episode_or_batch, EpisodeBatch) else prepare_episode(
        episode_or_batch, params)
    H, W = batch.image_shape
    N = batch.n_way
    with ag.no_grad():
        feats = forward_features(params, batch, "eval")
        props = propose(feats, batch, pcfg, training=False)
        empty = Prediction(props, np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0),
                           np.zeros((0, H, W), dtype=bool))
        if not props:
            return empty
        pboxes = np.array([p.box for p in props])
        logits, deltas, _ = classify_rois(params, feats, batch, pboxes)
        probs = np.exp(logits.data - logits.data.max(1, keepdims=True)).astype(np.float64)
        probs /= probs.sum(1, keepdims=True)
        pred = np.argmax(probs, axis=1)
        fg = np.flatnonzero(pred < N)
        if fg.size == 0:
            empty.probabilities = probs
            return empty
        slots = pred[fg]
        scores = probs[fg, slots]
        d = deltas.data[fg, slots].astype(np.float64)
        boxes = bx.clip_boxes(bx.decode(d, pboxes[fg], pcfg.det_box_weights), H, W)
        ok = bx.valid_boxes(boxes)
        boxes, slots, scores = boxes[ok], slots[ok], scores[ok]
        keep = []
        for s in np.unique(slots):
            idx = np.flatnonzero(slots == s)
            keep.extend(idx[nms(boxes[idx], scores[idx], pcfg.det_nms_iou)])
        keep = np.array(keep, dtype=np.int64)
        keep = keep[np.argsort(-scores[keep], kind="stable")][:pcfg.max_detections]
        boxes, slots, scores = boxes[keep], slots[keep], scores[keep]
        masks = np.zeros((len(keep), H, W), dtype=bool)
        if len(keep):
            ml = mask_logits(params, feats, batch, boxes, slots).data.astype(np.float64)
            prob = ag.sigmoid_np(ml)
            for i in range(len(keep)):
                masks[i] = paste_mask(prob[i], boxes[i], H, W)
    return Prediction(props, boxes, slots, scores, masks, probs)
