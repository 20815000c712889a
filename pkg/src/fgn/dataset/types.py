from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np


class DatasetError(ValueError):
    """Raised when an index cannot satisfy a sampling or construction request."""


@dataclass(frozen=True, eq=False)
class InstanceAnnotation:
    ann_id: int
    image_id: int
    class_id: int
    box: tuple  # (x1, y1, x2, y2), corner convention, pixels
    mask: np.ndarray  # bool, image resolution

    @property
    def area(self):
        return int(self.mask.sum())


@dataclass(eq=False)
class SupportInstance:
    patch: np.ndarray  # (h, w, 3) uint8 crop
    mask: np.ndarray  # (h, w) bool, aligned with patch
    class_id: int
    box: tuple  # instance box in patch coordinates
    window: tuple  # crop window in source-image coordinates
    source: InstanceAnnotation | None = None
    source_image: np.ndarray | None = field(default=None, repr=False)


@dataclass(eq=False)
class Episode:
    support: list  # N lists of K SupportInstance
    query: np.ndarray  # (H, W, 3) uint8
    query_truth: list  # InstanceAnnotation restricted to the episode classes
    class_map: tuple  # slot -> global class id
    query_id: int = -1
    primary_slot: int | None = None

    @property
    def n_way(self):
        return len(self.class_map)

    @property
    def k_shot(self):
        return len(self.support[0]) if self.support else 0

    def slot_of(self, class_id):
        return self.class_map.index(class_id)

    def truth_arrays(self):
        """(boxes (G, 4), slots (G,), masks (G, H, W))."""
        if not self.query_truth:
            H, W = self.query.shape[:2]
            return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros((0, H, W), dtype=bool)
        boxes = np.array([a.box for a in self.query_truth], dtype=np.float64)
        slots = np.array([self.slot_of(a.class_id) for a in self.query_truth], dtype=np.int64)
        masks = np.stack([a.mask for a in self.query_truth])
        return boxes, slots, masks


class AnnotationIndex:
    """Immutable class-view / image-view over a set of instance annotations."""

    def __init__(self, instances, images, base_classes, novel_classes, class_names=None, splits=None):
        self.instances = tuple(instances)
        self.images = images  # Mapping image_id -> (H, W, 3) uint8
        self.base_classes = tuple(sorted(base_classes))
        self.novel_classes = tuple(sorted(novel_classes))
        if set(self.base_classes) & set(self.novel_classes):
            raise DatasetError("base and novel classes overlap: "
                               f"{sorted(set(self.base_classes) & set(self.novel_classes))}")
        self.class_names = dict(class_names or {})
        self.splits = dict(splits or {})
        by_class, by_image = {}, {}
        for i, inst in enumerate(self.instances):
            by_class.setdefault(inst.class_id, []).append(i)
            by_image.setdefault(inst.image_id, []).append(i)
        self.by_class = {c: tuple(v) for c, v in sorted(by_class.items())}
        self.by_image = {m: tuple(v) for m, v in sorted(by_image.items())}

    def __len__(self):
        return len(self.instances)

    @property
    def classes(self):
        return tuple(self.by_class)

    @property
    def image_ids(self):
        return tuple(self.by_image)

    def class_instances(self, class_id):
        return [self.instances[i] for i in self.by_class.get(class_id, ())]

    def image_instances(self, image_id):
        return [self.instances[i] for i in self.by_image.get(image_id, ())]

    def class_counts(self):
        return {c: len(v) for c, v in self.by_class.items()}

    def _derive(self, instances):
        return AnnotationIndex(instances, self.images, self.base_classes, self.novel_classes,
                               self.class_names, self.splits)

    def restrict(self, classes=None, image_ids=None):
        """Sub-index keeping instances whose class and image pass the filters."""
        classes = None if classes is None else set(classes)
        image_ids = None if image_ids is None else set(image_ids)
        keep = [a for a in self.instances
                if (classes is None or a.class_id in classes)
                and (image_ids is None or a.image_id in image_ids)]
        return self._derive(keep)

    def split_images(self, split):
        return [m for m, s in sorted(self.splits.items()) if s == split]

    def base_view(self):
        """Training data D^base: base-class instances of the train split."""
        ids = self.split_images("train") if self.splits else None
        return self.restrict(self.base_classes, ids)

    def novel_view(self):
        """Novel-class instances of the test split."""
        ids = self.split_images("test") if self.splits else None
        return self.restrict(self.novel_classes, ids)


class ImageStore(Mapping):
    """Lazy PNG loader keyed by image id."""

    def __init__(self, paths):
        self._paths = dict(paths)
        self._cache = {}

    def __getitem__(self, key):
        if key not in self._cache:
            from PIL import Image

            with Image.open(self._paths[key]) as im:
                self._cache[key] = np.asarray(im.convert("RGB"))
        return self._cache[key]

    def __iter__(self):
        return iter(self._paths)

    def __len__(self):
        return len(self._paths)
