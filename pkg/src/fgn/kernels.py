"""Numeric hot spots: RoIAlign forward/backward, pairwise box IoU, greedy NMS.

Each kernel has a loop implementation (compiled by numba when available)
and a vectorized numpy implementation.  The public functions at the bottom
dispatch on :data:`fgn._jit.USE_NUMBA`; both paths are tested against each
other and against independent oracles.

Feature maps are channels-last, ``(H, W, C)``.  Boxes are ``(x1, y1, x2, y2)``
in input pixels; ``spatial_scale`` maps them onto the feature grid.  Sample
coordinates follow the half-pixel ("aligned") convention and are clamped to
the map border, so a constant map stays constant under alignment for any box.
"""

import numpy as np

from . import _jit
from ._jit import njit

# ---------------------------------------------------------------------------
# RoIAlign, numba path


@njit
def _roi_align_fwd_loop(feat, boxes, scale, out_h, out_w, sampling):
    H, W, C = feat.shape
    R = boxes.shape[0]
    out = np.zeros((R, out_h, out_w, C), dtype=feat.dtype)
    inv = 1.0 / (sampling * sampling)
    for r in range(R):
        x0 = boxes[r, 0] * scale - 0.5
        y0 = boxes[r, 1] * scale - 0.5
        bw = (boxes[r, 2] - boxes[r, 0]) * scale / out_w
        bh = (boxes[r, 3] - boxes[r, 1]) * scale / out_h
        for ph in range(out_h):
            for iy in range(sampling):
                y = y0 + ph * bh + (iy + 0.5) * bh / sampling
                y = min(max(y, 0.0), H - 1.0)
                ya = int(np.floor(y))
                yb = min(ya + 1, H - 1)
                ly = y - ya
                hy = 1.0 - ly
                for pw in range(out_w):
                    for ix in range(sampling):
                        x = x0 + pw * bw + (ix + 0.5) * bw / sampling
                        x = min(max(x, 0.0), W - 1.0)
                        xa = int(np.floor(x))
                        xb = min(xa + 1, W - 1)
                        lx = x - xa
                        hx = 1.0 - lx
                        w1 = hy * hx * inv
                        w2 = hy * lx * inv
                        w3 = ly * hx * inv
                        w4 = ly * lx * inv
                        for c in range(C):
                            out[r, ph, pw, c] += (
                                w1 * feat[ya, xa, c]
                                + w2 * feat[ya, xb, c]
                                + w3 * feat[yb, xa, c]
                                + w4 * feat[yb, xb, c]
                            )
    return out


@njit
def _roi_align_bwd_loop(grad, boxes, scale, H, W, sampling):
    R, out_h, out_w, C = grad.shape
    gfeat = np.zeros((H, W, C), dtype=grad.dtype)
    inv = 1.0 / (sampling * sampling)
    for r in range(R):
        x0 = boxes[r, 0] * scale - 0.5
        y0 = boxes[r, 1] * scale - 0.5
        bw = (boxes[r, 2] - boxes[r, 0]) * scale / out_w
        bh = (boxes[r, 3] - boxes[r, 1]) * scale / out_h
        for ph in range(out_h):
            for iy in range(sampling):
                y = y0 + ph * bh + (iy + 0.5) * bh / sampling
                y = min(max(y, 0.0), H - 1.0)
                ya = int(np.floor(y))
                yb = min(ya + 1, H - 1)
                ly = y - ya
                hy = 1.0 - ly
                for pw in range(out_w):
                    for ix in range(sampling):
                        x = x0 + pw * bw + (ix + 0.5) * bw / sampling
                        x = min(max(x, 0.0), W - 1.0)
                        xa = int(np.floor(x))
                        xb = min(xa + 1, W - 1)
                        lx = x - xa
                        hx = 1.0 - lx
                        w1 = hy * hx * inv
                        w2 = hy * lx * inv
                        w3 = ly * hx * inv
                        w4 = ly * lx * inv
                        for c in range(C):
                            g = grad[r, ph, pw, c]
                            gfeat[ya, xa, c] += w1 * g
                            gfeat[ya, xb, c] += w2 * g
                            gfeat[yb, xa, c] += w3 * g
                            gfeat[yb, xb, c] += w4 * g
    return gfeat


# ---------------------------------------------------------------------------
# RoIAlign, numpy path


def _sample_axis(lo, length, n_out, sampling, size, scale):
    """Per-RoI sample coordinates along one axis: (R, n_out * sampling)."""
    start = lo * scale - 0.5
    step = length * scale / n_out
    t = (np.arange(n_out)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling).ravel()
    pos = start[:, None] + t[None, :] * step[:, None]
    pos = np.clip(pos, 0.0, size - 1.0)
    a = np.floor(pos).astype(np.int64)
    b = np.minimum(a + 1, size - 1)
    frac = pos - a
    return a, b, frac


def _roi_align_fwd_np(feat, boxes, scale, out_h, out_w, sampling):
    H, W, C = feat.shape
    R = boxes.shape[0]
    if R == 0:
        return np.zeros((0, out_h, out_w, C), dtype=feat.dtype)
    ya, yb, ly = _sample_axis(boxes[:, 1], boxes[:, 3] - boxes[:, 1], out_h, sampling, H, scale)
    xa, xb, lx = _sample_axis(boxes[:, 0], boxes[:, 2] - boxes[:, 0], out_w, sampling, W, scale)
    Y = ya[:, :, None], yb[:, :, None]
    X = xa[:, None, :], xb[:, None, :]
    wy = (1.0 - ly)[:, :, None, None], ly[:, :, None, None]
    wx = (1.0 - lx)[:, None, :, None], lx[:, None, :, None]
    vals = 0.0
    for i in range(2):
        for j in range(2):
            vals = vals + wy[i] * wx[j] * feat[Y[i], X[j]]
    vals = vals.reshape(R, out_h, sampling, out_w, sampling, C)
    return vals.mean(axis=(2, 4)).astype(feat.dtype, copy=False)


def _roi_align_bwd_np(grad, boxes, scale, H, W, sampling):
    R, out_h, out_w, C = grad.shape
    gfeat = np.zeros((H, W, C), dtype=grad.dtype)
    if R == 0:
        return gfeat
    ya, yb, ly = _sample_axis(boxes[:, 1], boxes[:, 3] - boxes[:, 1], out_h, sampling, H, scale)
    xa, xb, lx = _sample_axis(boxes[:, 0], boxes[:, 2] - boxes[:, 0], out_w, sampling, W, scale)
    g = np.repeat(np.repeat(grad, sampling, axis=1), sampling, axis=2) / (sampling * sampling)
    Y = ya[:, :, None], yb[:, :, None]
    X = xa[:, None, :], xb[:, None, :]
    wy = (1.0 - ly)[:, :, None], ly[:, :, None]
    wx = (1.0 - lx)[:, None, :], lx[:, None, :]
    shape = (R, out_h * sampling, out_w * sampling)
    for i in range(2):
        for j in range(2):
            w = (wy[i] * wx[j])[..., None]
            yi = np.broadcast_to(Y[i], shape)
            xj = np.broadcast_to(X[j], shape)
            np.add.at(gfeat, (yi, xj), w * g)
    return gfeat


# ---------------------------------------------------------------------------
# Box IoU and NMS


@njit
def _box_iou_loop(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def _box_iou_np(a, b):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


@njit
def _nms_loop(boxes, order, thresh):
    n = order.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for ii in range(n):
        if suppressed[ii]:
            continue
        i = order[ii]
        keep[k] = i
        k += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for jj in range(ii + 1, n):
            if suppressed[jj]:
                continue
            j = order[jj]
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            union = area_i + area_j - inter
            if union > 0.0 and inter / union >= thresh:
                suppressed[jj] = True
    return keep[:k]


def _nms_np(boxes, order, thresh):
    iou = _box_iou_np(boxes[order], boxes[order])
    n = order.shape[0]
    alive = np.ones(n, dtype=bool)
    keep = []
    for ii in range(n):
        if not alive[ii]:
            continue
        keep.append(order[ii])
        alive[ii + 1:] &= iou[ii, ii + 1:] < thresh
    return np.asarray(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# Public dispatchers


def roi_align_forward(feat, boxes, spatial_scale, out_h, out_w, sampling=2, use_numba=None):
    feat = np.ascontiguousarray(feat)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if use_numba is None:
        use_numba = _jit.USE_NUMBA
    if use_numba:
        return _roi_align_fwd_loop(feat, boxes, float(spatial_scale), out_h, out_w, sampling)
    return _roi_align_fwd_np(feat, boxes, spatial_scale, out_h, out_w, sampling)


def roi_align_backward(grad, boxes, spatial_scale, height, width, sampling=2, use_numba=None):
    grad = np.ascontiguousarray(grad)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if use_numba is None:
        use_numba = _jit.USE_NUMBA
    if use_numba:
        return _roi_align_bwd_loop(grad, boxes, float(spatial_scale), height, width, sampling)
    return _roi_align_bwd_np(grad, boxes, spatial_scale, height, width, sampling)


def box_iou(a, b, use_numba=None):
    """Pairwise IoU matrix between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    if use_numba is None:
        use_numba = _jit.USE_NUMBA
    if use_numba:
        return _box_iou_loop(a, b)
    return _box_iou_np(a, b)


def nms(boxes, scores, iou_thresh, use_numba=None):
    """Greedy NMS. Returns kept indices in descending score order.

    A box is suppressed when its IoU with an already kept box is
    ``>= iou_thresh``.  Equal scores keep the lower index first.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    if use_numba is None:
        use_numba = _jit.USE_NUMBA
    if use_numba:
        return _nms_loop(boxes, order, float(iou_thresh))
    return _nms_np(boxes, order, iou_thresh)
