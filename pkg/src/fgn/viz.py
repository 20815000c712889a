"""Side-by-side PNG panels: support patches, query, ground truth, prediction."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

SLOT_COLORS = [(255, 64, 64), (64, 200, 255), (255, 220, 0), (120, 255, 120), (255, 120, 255)]


def _overlay(image, boxes, masks, slots, alpha=0.45):
    out = image.astype(np.float64).copy()
    for m, s in zip(masks, slots):
        c = np.array(SLOT_COLORS[int(s) % len(SLOT_COLORS)], dtype=np.float64)
        out[m] = (1 - alpha) * out[m] + alpha * c
    pil = Image.fromarray(out.clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    for b, s in zip(boxes, slots):
        draw.rectangle([float(v) for v in b], outline=SLOT_COLORS[int(s) % len(SLOT_COLORS)], width=1)
    return np.asarray(pil)


def _fit(img, height):
    h, w = img.shape[:2]
    width = max(1, int(round(w * height / h)))
    return np.asarray(Image.fromarray(img).resize((width, height), Image.BILINEAR))


def episode_panel(episode, prediction, gap=4):
    """(H, W_total, 3) uint8 strip: supports | query | ground truth | prediction."""
    q = episode.query
    H = q.shape[0]
    gb, gs, gm = episode.truth_arrays()
    panels = [_fit(s.patch, H) for shots in episode.support for s in shots]
    panels += [q, _overlay(q, gb, gm, gs),
               _overlay(q, prediction.boxes, prediction.masks, prediction.slots)]
    sep = np.full((H, gap, 3), 255, dtype=np.uint8)
    strip = []
    for p in panels:
        strip += [p, sep]
    return np.concatenate(strip[:-1], axis=1)


def save_panel(path, episode, prediction):
    img = episode_panel(episode, prediction)
    Image.fromarray(img).save(path)
    return img.shape


def save_masks(prefix, prediction):
    """One binary PNG per detection, in query-image coordinates; returns the paths."""
    paths = []
    for i, m in enumerate(prediction.masks):
        path = f"{prefix}_mask{i:02d}.png"
        Image.fromarray(m.astype(np.uint8) * 255).save(path)
        paths.append(path)
    return paths
