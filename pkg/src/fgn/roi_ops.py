"""RoIAlign of feature maps and masks, and masked pooling."""

from __future__ import annotations

import logging

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor, as_tensor

log = logging.getLogger(__name__)


class EmptyMask(ValueError):
    """Masked pooling over a mask with no positive cell."""


def _check_boxes(boxes):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    bad = (b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])
    if bad.any():
        raise ValueError(f"zero-area box for RoIAlign: {b[np.argmax(bad)].tolist()}")
    return b


def roi_align(feature_map, boxes, out_h, out_w, stride=1, sampling=2) -> Tensor:
    """Bilinear, quantization-free alignment of (H, W, C) features.

    ``boxes`` are (R, 4) or a single box in input pixels; returns
    (R, out_h, out_w, C), or (out_h, out_w, C) for a single box.  Each output
    cell averages ``sampling`` x ``sampling`` bilinear samples.
    """
    single = np.ndim(boxes) == 1
    b = _check_boxes(boxes)
    out = ag.roi_align(as_tensor(feature_map), b, 1.0 / stride, out_h, out_w, sampling)
    return out[0] if single else out


def align_masks(mask, boxes, size, sampling=2):
    """Resample a binary image-resolution mask into each box at ``size`` x ``size``.

    Returns soft values in [0, 1]; threshold at 0.5 for the binary view.
    """
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    b = _check_boxes(boxes)
    return kernels.roi_align_forward(m, b, 1.0, size, size, sampling)[..., 0]


def binarize(mask, thresh=0.5):
    return np.asarray(mask) >= thresh


def masked_pool(feat, mask) -> Tensor:
    """out[c] = sum_ij feat[i,j,c] m[i,j] / sum_ij m[i,j] with m = mask >= 0.5."""
    feat = as_tensor(feat)
    m = binarize(mask)
    if m.shape != feat.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match feature grid {feat.shape[:2]}")
    total = float(m.sum())
    if total == 0:
        raise EmptyMask("binarized mask has no positive cell")
    w = (m / total).astype(feat.dtype)[:, :, None]
    return ag.tsum(feat * w, (0, 1))


def masked_pool_or_gap(feat, mask) -> Tensor:
    try:
        return masked_pool(feat, mask)
    except EmptyMask:
        log.warning("empty support mask after alignment; falling back to global average pooling")
        return ag.mean(as_tensor(feat), (0, 1))
