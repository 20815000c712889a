"""Support cropping, episode simulation, test-task enumeration and fine-tune sets."""

from __future__ import annotations

import math

import numpy as np

from .types import AnnotationIndex, DatasetError, Episode, SupportInstance


def crop_window(box, margin_px, height, width):
    x1, y1, x2, y2 = box
    return (max(0, int(math.floor(x1 - margin_px))), max(0, int(math.floor(y1 - margin_px))),
            min(width, int(math.ceil(x2 + margin_px))), min(height, int(math.ceil(y2 + margin_px))))


def crop_support_patch(image, annotation, margin_px=20) -> SupportInstance:
    """Cut the instance box grown by ``margin_px`` on every side, clamped to the image."""
    if margin_px < 0:
        raise DatasetError(f"margin_px must be >= 0, got {margin_px}")
    x1, y1, x2, y2 = annotation.box
    if x2 <= x1 or y2 <= y1:
        raise DatasetError(f"degenerate box {annotation.box} for annotation {annotation.ann_id}")
    H, W = image.shape[:2]
    wx1, wy1, wx2, wy2 = crop_window(annotation.box, margin_px, H, W)
    patch = image[wy1:wy2, wx1:wx2]
    mask = annotation.mask[wy1:wy2, wx1:wx2]
    box = (x1 - wx1, y1 - wy1, x2 - wx1, y2 - wy1)
    return SupportInstance(patch, mask, annotation.class_id, box, (wx1, wy1, wx2, wy2),
                           source=annotation, source_image=image)


def resize_support(inst: SupportInstance, size):
    """Square-resize a support patch: bilinear image, nearest mask, box rescaled.

    Returns (image (size, size, 3) uint8, mask (size, size) bool, box).
    """
    from PIL import Image

    h, w = inst.patch.shape[:2]
    img = np.asarray(Image.fromarray(inst.patch).resize((size, size), Image.BILINEAR))
    msk = np.asarray(Image.fromarray(inst.mask.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) > 127
    sx, sy = size / w, size / h
    x1, y1, x2, y2 = inst.box
    return img, msk, (x1 * sx, y1 * sy, x2 * sx, y2 * sy)


def _draw(rng, items, k):
    idx = rng.choice(len(items), size=k, replace=False)
    return [items[i] for i in idx]


def sample_training_episode(index: AnnotationIndex, N, K, rng, margin_px=20,
                            allow_self_support=False, max_tries=100) -> Episode:
    """Simulate one N-way K-shot episode from the classes present in ``index``.

    Classes are drawn uniformly without replacement; the query is drawn
    uniformly from images holding at least one episode class and enough
    remaining instances for every class; supports come from other images.
    With ``allow_self_support`` a class lacking K outside instances may take
    supports from the query image itself (used when fine-tuning on K-shot
    novel data, where no spare instance exists).
    """
    eligible = [c for c, ids in index.by_class.items() if len(ids) >= K]
    if len(eligible) < N:
        raise DatasetError(f"need {N} classes with >= {K} instances, index has {len(eligible)}")
    for _ in range(max_tries):
        classes = [eligible[i] for i in rng.choice(len(eligible), size=N, replace=False)]
        candidates = sorted({index.instances[i].image_id for c in classes for i in index.by_class[c]})
        valid = []
        for m in candidates:
            ok = all(sum(index.instances[i].image_id != m for i in index.by_class[c]) >= K
                     for c in classes)
            if ok or allow_self_support:
                valid.append(m)
        if valid:
            break
    else:
        raise DatasetError(f"no query image leaves {K} support instances per class after {max_tries} tries")
    query_id = valid[int(rng.integers(len(valid)))]
    query = index.images[query_id]
    support = []
    for c in classes:
        pool = [index.instances[i] for i in index.by_class[c] if index.instances[i].image_id != query_id]
        if len(pool) < K:
            pool = [index.instances[i] for i in index.by_class[c]]
        support.append([crop_support_patch(index.images[a.image_id], a, margin_px)
                        for a in _draw(rng, pool, K)])
    truth = [a for a in index.image_instances(query_id) if a.class_id in classes]
    return Episode(support, query, truth, tuple(classes), query_id)


def build_test_tasks(index: AnnotationIndex, N, K, rng, margin_px=20) -> list:
    """One task per (test image, class present); N-1 extra classes sampled per task."""
    classes = list(index.classes)
    if N > len(classes):
        raise DatasetError(f"N={N} exceeds the {len(classes)} available novel classes")
    tasks = []
    for image_id in index.image_ids:
        present = sorted({a.class_id for a in index.image_instances(image_id)})
        for primary in present:
            others = [c for c in classes if c != primary]
            extra = [others[i] for i in rng.choice(len(others), size=N - 1, replace=False)] if N > 1 else []
            slots = [primary] + extra
            order = rng.permutation(N)
            slots = [slots[i] for i in order]
            support = []
            for c in slots:
                pool = [a for a in index.class_instances(c) if a.image_id != image_id]
                if len(pool) < K:
                    raise DatasetError(f"class {c} ({index.class_names.get(c, c)}) has {len(pool)} "
                                       f"support instances outside image {image_id}, need {K}")
                support.append([crop_support_patch(index.images[a.image_id], a, margin_px)
                                for a in _draw(rng, pool, K)])
            truth = [a for a in index.image_instances(image_id) if a.class_id in slots]
            tasks.append(Episode(support, index.images[image_id], truth, tuple(slots), image_id,
                                 primary_slot=slots.index(primary)))
    return tasks


def select_novel_support(index: AnnotationIndex, K, rng, margin_px=20) -> list:
    """K crops per novel class: the D^novel support set used for fine-tuning."""
    out = []
    for c in index.classes:
        pool = index.class_instances(c)
        if len(pool) < K:
            raise DatasetError(f"class {c} has only {len(pool)} instances, need {K}")
        out.extend(crop_support_patch(index.images[a.image_id], a, margin_px) for a in _draw(rng, pool, K))
    return out


def build_finetune_set(base_index: AnnotationIndex, novel_support, N, K, rng) -> AnnotationIndex:
    """All N*K novel supports plus 3K random instances of every base class."""
    novel_classes = sorted({s.class_id for s in novel_support})
    if len(novel_classes) != N or len(novel_support) != N * K:
        raise DatasetError(f"expected {N * K} novel supports over {N} classes, got "
                           f"{len(novel_support)} over {len(novel_classes)}")
    chosen = []
    for c in base_index.base_classes:
        pool = base_index.class_instances(c)
        if len(pool) < 3 * K:
            raise DatasetError(f"base class {c} ({base_index.class_names.get(c, c)}) has "
                               f"{len(pool)} instances, need 3K={3 * K}")
        chosen.extend(_draw(rng, pool, 3 * K))
    images = {a.image_id: base_index.images[a.image_id] for a in chosen}
    for s in novel_support:
        if s.source is None or s.source_image is None:
            raise DatasetError("novel support instance lacks its source annotation")
        chosen.append(s.source)
        images[s.source.image_id] = s.source_image
    return AnnotationIndex(chosen, images, base_index.base_classes,
                           sorted(set(base_index.novel_classes) | set(novel_classes)),
                           base_index.class_names)


def finetune_size(N, K, num_base):
    return (N + 3 * num_base) * K
