"""Anchor generation and the center/size box parameterization."""

import numpy as np

from .kernels import box_iou

BBOX_CLIP = np.log(1000.0 / 16)


def anchor_templates(scales, aspects):
    """(A, 4) zero-centered templates; aspect is height / width."""
    out = []
    for s in scales:
        for r in aspects:
            w, h = s / np.sqrt(r), s * np.sqrt(r)
            out.append((-w / 2, -h / 2, w / 2, h / 2))
    return np.array(out, dtype=np.float64)


def generate_anchors(feat_h, feat_w, stride, scales, aspects):
    """(feat_h * feat_w * A, 4) anchors ordered (row, col, template)."""
    t = anchor_templates(scales, aspects)
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    ctr = np.stack([cxx, cyy, cxx, cyy], axis=-1)[:, :, None, :]
    return (ctr + t[None, None]).reshape(-1, 4)


def encode(boxes, refs, weights=(1.0, 1.0, 1.0, 1.0)):
    """Deltas (dx, dy, dw, dh) taking ``refs`` onto ``boxes``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    rw, rh = refs[:, 2] - refs[:, 0], refs[:, 3] - refs[:, 1]
    rx, ry = refs[:, 0] + 0.5 * rw, refs[:, 1] + 0.5 * rh
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + 0.5 * bw, boxes[:, 1] + 0.5 * bh
    return np.stack([wx * (bx - rx) / rw, wy * (by - ry) / rh,
                     ww * np.log(bw / rw), wh * np.log(bh / rh)], axis=1)


def decode(deltas, refs, weights=(1.0, 1.0, 1.0, 1.0)):
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    rw, rh = refs[:, 2] - refs[:, 0], refs[:, 3] - refs[:, 1]
    rx, ry = refs[:, 0] + 0.5 * rw, refs[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, BBOX_CLIP)
    dh = np.minimum(deltas[:, 3] / wh, BBOX_CLIP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * np.exp(dw), rh * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, height, width):
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def valid_boxes(boxes, min_size=1e-3):
    return ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)


__all__ = ["anchor_templates", "generate_anchors", "encode", "decode", "clip_boxes", "valid_boxes", "box_iou"]
