"""Label assignment for anchors, RoIs and masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .config import ProposalConfig
from .roi_ops import align_masks

IGNORE, NEGATIVE = -2, -1


@dataclass
class RPNTargets:
    labels: np.ndarray  # (M,) slot >= 0, NEGATIVE, or IGNORE
    box_targets: np.ndarray  # (M, 4), meaningful for positives
    sampled: np.ndarray  # indices entering the loss

    def as_dict(self):
        return {"labels": self.labels, "box_targets": self.box_targets, "sampled": self.sampled}

    @property
    def num_positive(self):
        return int(np.sum(self.labels >= 0))


@dataclass
class RoITargets:
    boxes: np.ndarray  # (R, 4) sampled RoIs
    labels: np.ndarray  # (R,) slot, or N for background
    box_targets: np.ndarray  # (R, 4)
    mask_targets: np.ndarray  # (F, M, M) for the foreground RoIs, in order

    @property
    def fg(self):
        return np.flatnonzero(self.labels < self.background)

    background: int = 0


def label_anchors(anchors, gt_boxes, gt_slots, pos_iou=0.5, neg_iou=0.3):
    """Per-anchor slot / NEGATIVE / IGNORE plus matched-GT index (-1 if none)."""
    M = anchors.shape[0]
    labels = np.full(M, IGNORE, dtype=np.int64)
    match = np.full(M, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return labels, match
    iou = bx.box_iou(anchors, gt_boxes)
    best = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(M), best]
    labels[best_iou < neg_iou] = NEGATIVE
    pos = best_iou >= pos_iou
    labels[pos] = np.asarray(gt_slots)[best[pos]]
    match[pos] = best[pos]
    return labels, match


def _subsample(rng, idx, k):
    if len(idx) <= k:
        return idx
    return np.sort(rng.choice(idx, size=k, replace=False))


def assign_rpn(anchors, gt_boxes, gt_slots, cfg: ProposalConfig, rng):
    labels, match = label_anchors(anchors, gt_boxes, gt_slots, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    box_targets = np.zeros((anchors.shape[0], 4))
    pos = np.flatnonzero(labels >= 0)
    if pos.size:
        box_targets[pos] = bx.encode(np.asarray(gt_boxes)[match[pos]], anchors[pos], cfg.rpn_box_weights)
    n_pos = int(cfg.rpn_batch * cfg.rpn_pos_fraction)
    pos = _subsample(rng, pos, n_pos)
    neg = _subsample(rng, np.flatnonzero(labels == NEGATIVE), cfg.rpn_batch - len(pos))
    return RPNTargets(labels, box_targets, np.concatenate([pos, neg]))


def assign_rois(proposal_boxes, gt_boxes, gt_slots, gt_masks, n_way, cfg: ProposalConfig, mask_size, rng,
                add_gt=True):
    """Sample RoIs at the configured fg:bg ratio and build box / mask targets."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cand = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    if add_gt and len(gt_boxes):
        cand = np.concatenate([cand, gt_boxes])
    labels = np.full(len(cand), n_way, dtype=np.int64)
    match = np.full(len(cand), -1, dtype=np.int64)
    if len(gt_boxes) and len(cand):
        iou = bx.box_iou(cand, gt_boxes)
        best = np.argmax(iou, axis=1)
        fg = iou[np.arange(len(cand)), best] >= cfg.roi_fg_iou
        labels[fg] = np.asarray(gt_slots)[best[fg]]
        match[fg] = best[fg]
    fg_idx = _subsample(rng, np.flatnonzero(labels < n_way), int(cfg.roi_batch * cfg.roi_fg_fraction))
    bg_idx = _subsample(rng, np.flatnonzero(labels == n_way), cfg.roi_batch - len(fg_idx))
    keep = np.concatenate([fg_idx, bg_idx])
    rois, labels, match = cand[keep], labels[keep], match[keep]
    box_targets = np.zeros((len(keep), 4))
    fg = np.flatnonzero(labels < n_way)
    masks = np.zeros((len(fg), mask_size, mask_size), dtype=bool)
    if fg.size:
        box_targets[fg] = bx.encode(gt_boxes[match[fg]], rois[fg], cfg.det_box_weights)
        for i, r in enumerate(fg):
            masks[i] = align_masks(gt_masks[match[r]], rois[r], mask_size)[0] >= 0.5
    return RoITargets(rois, labels, box_targets, masks, background=n_way)
