"""COCO-style JSON annotation I/O (uncompressed RLE and polygon masks)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .types import AnnotationIndex, DatasetError, ImageStore, InstanceAnnotation


def rle_encode(mask):
    """Uncompressed COCO RLE; counts run over the column-major flattening, zeros first."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle):
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        raise DatasetError("compressed RLE strings are not supported; use uncompressed counts")
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape((h, w), order="F")


def polygons_to_mask(polygons, height, width):
    from PIL import Image, ImageDraw

    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        pts = list(zip(poly[0::2], poly[1::2]))
        if len(pts) >= 3:
            draw.polygon(pts, fill=1)
    return np.asarray(canvas, dtype=bool)


def _box_from_xywh(b, width, height):
    x, y, w, h = b
    x1, y1 = max(0.0, float(x)), max(0.0, float(y))
    x2, y2 = min(float(width), float(x) + float(w)), min(float(height), float(y) + float(h))
    return (x1, y1, x2, y2)


def save_corpus(index: AnnotationIndex, out_dir, manifest=None):
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = []
    for image_id in sorted(index.images):
        img = index.images[image_id]
        name = f"{image_id:06d}.png"
        Image.fromarray(img).save(out / "images" / name)
        entry = {"id": image_id, "file_name": name, "height": int(img.shape[0]), "width": int(img.shape[1])}
        if image_id in index.splits:
            entry["split"] = index.splits[image_id]
        images.append(entry)
    anns = []
    for a in index.instances:
        x1, y1, x2, y2 = a.box
        anns.append({
            "id": a.ann_id, "image_id": a.image_id, "category_id": a.class_id,
            "bbox": [x1, y1, x2 - x1, y2 - y1], "area": a.area, "iscrowd": 0,
            "segmentation": rle_encode(a.mask),
        })
    cats = [{"id": c, "name": index.class_names.get(c, str(c)),
             "split": "base" if c in index.base_classes else "novel"}
            for c in sorted(set(index.base_classes) | set(index.novel_classes))]
    doc = {"images": images, "annotations": anns, "categories": cats}
    (out / "annotations.json").write_text(json.dumps(doc, sort_keys=True))
    man = dict(manifest or {})
    man.update({
        "base_classes": {str(c): index.class_names.get(c, str(c)) for c in index.base_classes},
        "novel_classes": {str(c): index.class_names.get(c, str(c)) for c in index.novel_classes},
        "num_images": len(images), "num_instances": len(anns),
    })
    (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=2))
    return out


def load_corpus(data_dir, base_classes=None, novel_classes=None) -> AnnotationIndex:
    """Load ``annotations.json`` + ``images/`` into an index.

    The base/novel split comes from each category's ``split`` field unless
    given explicitly; categories with neither are treated as base.
    """
    root = Path(data_dir)
    path = root / "annotations.json"
    if not path.exists():
        raise FileNotFoundError(f"no annotations.json under {root}")
    doc = json.loads(path.read_text())
    sizes, paths, splits = {}, {}, {}
    for im in doc["images"]:
        sizes[im["id"]] = (im["height"], im["width"])
        paths[im["id"]] = root / "images" / im["file_name"]
        if "split" in im:
            splits[im["id"]] = im["split"]
    names = {c["id"]: c.get("name", str(c["id"])) for c in doc["categories"]}
    if base_classes is None:
        novel = set(novel_classes or [c["id"] for c in doc["categories"] if c.get("split") == "novel"])
        base_classes = [c for c in names if c not in novel]
        novel_classes = sorted(novel)
    instances = []
    for a in doc["annotations"]:
        if a.get("iscrowd", 0):
            continue
        h, w = sizes[a["image_id"]]
        seg = a.get("segmentation")
        if isinstance(seg, dict):
            mask = rle_decode(seg)
        elif isinstance(seg, list) and seg:
            mask = polygons_to_mask(seg, h, w)
        else:
            raise DatasetError(f"annotation {a['id']} has no usable segmentation")
        if not mask.any():
            continue
        box = _box_from_xywh(a["bbox"], w, h)
        if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
            continue
        instances.append(InstanceAnnotation(a["id"], a["image_id"], a["category_id"],
                                            tuple(int(v) if float(v).is_integer() else v for v in box),
                                            mask))
    return AnnotationIndex(instances, ImageStore(paths), base_classes, novel_classes, names, splits)
