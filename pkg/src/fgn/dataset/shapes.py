"""Synthetic colored-shapes corpus with pixel-exact instance masks."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .types import AnnotationIndex, DatasetError, InstanceAnnotation

log = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle", "diamond", "cross", "ring", "star")

# one hue per shape; instances jitter around it when color_mode == "class"
PALETTE = {
    "square": (230, 60, 60),
    "circle": (60, 200, 60),
    "triangle": (70, 90, 240),
    "diamond": (235, 210, 50),
    "cross": (210, 70, 220),
    "ring": (50, 210, 220),
    "star": (245, 150, 40),
}


def _star_polygon(points=5, inner=0.45):
    ang = -np.pi / 2 + np.arange(2 * points) * np.pi / points
    rad = np.where(np.arange(2 * points) % 2 == 0, 0.5, 0.5 * inner)
    return np.stack([0.5 + rad * np.cos(ang), 0.5 + rad * np.sin(ang)], axis=1)


_POLYGONS = {
    "triangle": np.array([[0.5, 0.0], [1.0, 1.0], [0.0, 1.0]]),
    "star": _star_polygon(),
}


def _inside_polygon(u, v, poly):
    """Even-odd rule for points (u, v) against a closed polygon."""
    inside = np.zeros(u.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        crosses = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (u < xint)
    return inside


def rasterize_shape(shape, x0, y0, size, height, width):
    """Binary mask of ``shape`` inscribed in the square [x0, x0+size) x [y0, y0+size).

    A pixel belongs to the shape when its center does.
    """
    if shape not in SHAPES:
        raise DatasetError(f"unknown shape {shape!r}; vocabulary is {SHAPES}")
    ys, xs = np.mgrid[0:height, 0:width]
    u = (xs + 0.5 - x0) / size
    v = (ys + 0.5 - y0) / size
    inbox = (u > 0) & (u < 1) & (v > 0) & (v < 1)
    du, dv = u - 0.5, v - 0.5
    if shape == "square":
        m = inbox
    elif shape == "circle":
        m = du * du + dv * dv <= 0.25
    elif shape == "ring":
        r2 = du * du + dv * dv
        m = (r2 <= 0.25) & (r2 >= 0.0784)  # inner radius 0.28
    elif shape == "diamond":
        m = np.abs(du) + np.abs(dv) <= 0.5
    elif shape == "cross":
        m = inbox & ((np.abs(du) <= 1 / 6) | (np.abs(dv) <= 1 / 6))
    else:
        m = _inside_polygon(u, v, _POLYGONS[shape])
    return m & inbox


def mask_to_box(mask):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DatasetError("empty mask has no box")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass
class ShapesConfig:
    base_classes: tuple = ("square", "circle", "triangle", "diamond", "cross")
    novel_classes: tuple = ("ring", "star")
    num_images: int = 400
    test_fraction: float = 0.2
    image_size: int = 128
    instances_per_image: tuple = (2, 4)
    size_range: tuple = (20, 40)
    # test images: number of novel-class shapes, plus base-class distractors
    novel_per_test_image: tuple = (1, 3)
    distractors_per_test_image: tuple = (0, 2)
    color_mode: str = "class"  # "class": palette hue + jitter, "random": uniform
    color_jitter: int = 25
    background_range: tuple = (0, 90)
    noise_std: float = 6.0
    gap: int = 2
    max_retries: int = 60

    def validate(self):
        if len(self.base_classes) < 2:
            raise DatasetError("need at least 2 base classes")
        if len(self.novel_classes) < 1:
            raise DatasetError("need at least 1 novel class")
        for s in tuple(self.base_classes) + tuple(self.novel_classes):
            if s not in SHAPES:
                raise DatasetError(f"unknown shape {s!r}; vocabulary is {SHAPES}")
        if set(self.base_classes) & set(self.novel_classes):
            raise DatasetError("base and novel classes overlap")
        if self.color_mode not in ("class", "random"):
            raise DatasetError(f"color_mode must be 'class' or 'random', got {self.color_mode!r}")
        lo, hi = self.size_range
        if not 4 <= lo <= hi < self.image_size:
            raise DatasetError(f"bad size_range {self.size_range} for image_size {self.image_size}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class _Placed:
    shape: str
    mask: np.ndarray
    box: tuple
    color: tuple = field(default=(0, 0, 0))


def _try_layout(rng, shapes, cfg):
    S = cfg.image_size
    placed = []
    for shape in shapes:
        for _ in range(cfg.max_retries):
            size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
            x0 = int(rng.integers(0, S - size + 1))
            y0 = int(rng.integers(0, S - size + 1))
            g = cfg.gap
            if all(x0 + size + g <= p.box[0] or p.box[2] + g <= x0
                   or y0 + size + g <= p.box[1] or p.box[3] + g <= y0 for p in placed):
                mask = rasterize_shape(shape, x0, y0, size, S, S)
                if mask.any():
                    placed.append(_Placed(shape, mask, mask_to_box(mask)))
                    break
        else:
            return None
    return placed


def _render_image(rng, cfg, train):
    names = cfg.base_classes if train else None
    if train:
        n = int(rng.integers(cfg.instances_per_image[0], cfg.instances_per_image[1] + 1))
        shapes = [names[i] for i in rng.integers(0, len(names), size=n)]
    else:
        nn = int(rng.integers(cfg.novel_per_test_image[0], cfg.novel_per_test_image[1] + 1))
        nd = int(rng.integers(cfg.distractors_per_test_image[0], cfg.distractors_per_test_image[1] + 1))
        shapes = [cfg.novel_classes[i] for i in rng.integers(0, len(cfg.novel_classes), size=nn)]
        shapes += [cfg.base_classes[i] for i in rng.integers(0, len(cfg.base_classes), size=nd)]
    placed = _try_layout(rng, shapes, cfg)
    if placed is None:
        return None
    S = cfg.image_size
    bg = rng.integers(cfg.background_range[0], cfg.background_range[1] + 1, size=3)
    img = np.empty((S, S, 3), dtype=np.float64)
    img[:] = bg
    for p in placed:
        if cfg.color_mode == "class":
            base = np.array(PALETTE[p.shape], dtype=np.float64)
            col = base + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
        else:
            col = rng.uniform(100, 255, size=3)
        img[p.mask] = col
    img += rng.normal(0.0, cfg.noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), placed


def generate_shapes_corpus(config: ShapesConfig, seed: int, out_dir=None) -> AnnotationIndex:
    """Render the corpus; optionally write PNGs, COCO JSON and a manifest to ``out_dir``.

    Each image takes its randomness from ``(seed, image_id, attempt)``; a
    layout that cannot be placed within ``max_retries`` is discarded whole and
    redrawn with the next attempt number.
    """
    config.validate()
    names = list(config.base_classes) + list(config.novel_classes)
    class_ids = {name: i + 1 for i, name in enumerate(names)}
    n_test = int(round(config.num_images * config.test_fraction))
    n_train = config.num_images - n_test
    images, instances, splits = {}, [], {}
    ann_id = 1
    for image_id in range(1, config.num_images + 1):
        train = image_id <= n_train
        attempt = 0
        while True:
            rng = np.random.default_rng([seed, image_id, attempt])
            out = _render_image(rng, config, train)
            if out is not None:
                break
            attempt += 1
            log.debug("image %d: layout failed, attempt %d", image_id, attempt)
        img, placed = out
        images[image_id] = img
        splits[image_id] = "train" if train else "test"
        for p in placed:
            instances.append(InstanceAnnotation(ann_id, image_id, class_ids[p.shape], p.box, p.mask))
            ann_id += 1
    index = AnnotationIndex(
        instances, images,
        base_classes=[class_ids[n] for n in config.base_classes],
        novel_classes=[class_ids[n] for n in config.novel_classes],
        class_names={v: k for k, v in class_ids.items()},
        splits=splits,
    )
    if out_dir is not None:
        from .coco import save_corpus

        save_corpus(index, out_dir, manifest={"seed": seed, "config": config.to_dict(),
                                              "num_train": n_train, "num_test": n_test})
    return index


def load_manifest(data_dir):
    return json.loads((Path(data_dir) / "manifest.json").read_text())
