"""IoU, AP50 / AR50 and the per-task evaluation harness."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kernels import box_iou

AP_HEADER = "AP50 with all-point interpolation; only the primary class of each task is scored"


def iou(a, b):
    """IoU of two boxes (x1, y1, x2, y2) or of two same-shape binary masks."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape == (4,) and b.shape == (4,) and a.dtype != bool:
        aw, ah = max(a[2] - a[0], 0.0), max(a[3] - a[1], 0.0)
        bw, bh = max(b[2] - b[0], 0.0), max(b[3] - b[1], 0.0)
        iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
        ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
        inter = iw * ih
        union = aw * ah + bw * bh - inter
        if union <= 0:
            raise ValueError("IoU of two empty boxes is undefined")
        return float(inter / union)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(pred, truth):
    """(P, T) IoU between stacks of binary masks; empty-vs-empty pairs score 0."""
    p = np.asarray(pred, dtype=bool).reshape(len(pred), -1).astype(np.float64)
    t = np.asarray(truth, dtype=bool).reshape(len(truth), -1).astype(np.float64)
    inter = p @ t.T
    union = p.sum(1)[:, None] + t.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _overlaps(pred, truth, kind):
    if kind == "box":
        return box_iou(np.asarray(pred, dtype=np.float64).reshape(-1, 4),
                       np.asarray(truth, dtype=np.float64).reshape(-1, 4))
    return mask_iou_matrix(pred, truth)


def match_greedy(overlaps, order, thresh=0.5):
    """True-positive flags for predictions visited in ``order``; each truth matches once.

    A prediction claims the unmatched truth of highest IoU at or above ``thresh``.
    """
    P, T = overlaps.shape
    taken = np.zeros(T, dtype=bool)
    tp = np.zeros(P, dtype=bool)
    for i in order:
        if T == 0:
            break
        cand = np.where(taken, -1.0, overlaps[i])
        j = int(np.argmax(cand))
        if cand[j] >= thresh:
            taken[j] = True
            tp[i] = True
    return tp


def average_precision_50(pred, scores, truth, kind="box", thresh=0.5):
    """All-point interpolated AP at IoU ``thresh``; None when there is nothing to score."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n_truth = len(truth)
    if n_truth == 0:
        return None if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = match_greedy(_overlaps(pred, truth, kind), order, thresh)[order]
    ctp = np.cumsum(tp)
    recall = ctp / n_truth
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_recall_50(proposals, scores, truth, cap=100, thresh=0.5):
    """Fraction of truths hit by at least one of the top ``cap`` proposals; None if no truths."""
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 4)
    if len(truth) == 0:
        return None
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(props) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:cap]
    hit = (box_iou(props[order], truth) >= thresh).any(axis=0)
    return float(hit.mean())


# ---------------------------------------------------------------------------
# harness


@dataclass
class TaskRecord:
    task_id: int
    image_id: int
    primary_class: int
    det_ap50: float | None
    seg_ap50: float | None
    ar50: float | None
    num_truth: int
    num_detections: int


@dataclass
class EvalReport:
    records: list
    config: dict = field(default_factory=dict)
    checkpoint: str = ""
    header: str = AP_HEADER

    @staticmethod
    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def aggregates(self):
        return {
            "det_map50": self._mean(r.det_ap50 for r in self.records),
            "seg_map50": self._mean(r.seg_ap50 for r in self.records),
            "ar50": self._mean(r.ar50 for r in self.records),
            "num_tasks": len(self.records),
        }

    def to_dict(self):
        return {"header": self.header, "checkpoint": self.checkpoint, "config": self.config,
                "aggregates": self.aggregates, "records": [asdict(r) for r in self.records]}

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "image_id", "primary_class", "det_ap50", "seg_ap50", "ar50"])
            for r in self.records:
                w.writerow([r.task_id, r.image_id, r.primary_class,
                            *("" if v is None else f"{v:.6f}" for v in (r.det_ap50, r.seg_ap50, r.ar50))])
        return out

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls([TaskRecord(**r) for r in d["records"]], d.get("config", {}), d.get("checkpoint", ""),
                   d.get("header", AP_HEADER))


def score_task(task_id, task, prediction, ar_cap=100):
    """Score one task's prediction against the truth of its primary class."""
    slot = task.primary_slot if task.primary_slot is not None else 0
    cls = task.class_map[slot]
    gb, gs, gm = task.truth_arrays()
    sel = gs == slot
    sel_p = prediction.slots == slot
    det = average_precision_50(prediction.boxes[sel_p], prediction.scores[sel_p], gb[sel], "box")
    seg = average_precision_50(prediction.masks[sel_p], prediction.scores[sel_p], gm[sel], "mask")
    props = prediction.proposals
    pboxes = np.array([p.box for p in props]).reshape(-1, 4)
    pscores = np.array([p.score for p in props])
    ar = average_recall_50(pboxes, pscores, gb[sel], ar_cap)
    return TaskRecord(task_id, int(task.query_id), int(cls), det, seg, ar, int(sel.sum()), int(sel_p.sum()))


def write_detections_csv(path, prediction, class_map):
    """One row per detection: box, corpus class id and score."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x1", "y1", "x2", "y2", "class", "score"])
        for b, s, sc in zip(prediction.boxes, prediction.slots, prediction.scores):
            w.writerow([f"{v:.3f}" for v in b] + [int(class_map[int(s)]), f"{sc:.6f}"])


def evaluate(predictor, tasks, ar_cap=100, config=None, checkpoint=""):
    """Run ``predictor(task) -> Prediction`` on every task and aggregate.

    ``predictor`` is usually ``functools.partial(model.predict, params, pcfg)``
    wrapped by :func:`make_predictor`; tests inject oracle predictors here.
    """
    records = [score_task(i, t, predictor(t), ar_cap) for i, t in enumerate(tasks)]
    return EvalReport(records, dict(config or {}), str(checkpoint))


def make_predictor(params, pcfg):
    from .model import predict

    return lambda task: predict(params, task, pcfg)


def oracle_predictor(task):
    """Emits the ground truth itself: every metric must come out at 1.0."""
    from .guidance_rpn import Proposal
    from .model import Prediction

    gb, gs, gm = task.truth_arrays()
    N = task.n_way
    props = [Proposal(tuple(b), np.eye(N)[s], int(s), 1.0) for b, s in zip(gb, gs)]
    return Prediction(props, gb, gs, np.ones(len(gb)), gm)


def evaluate_checkpoint(path, tasks, pcfg, expect=None, ar_cap=100, config=None):
    """Load a checkpoint (validating it against ``expect``) before any task runs."""
    from .backbone import ModelParameters

    params = ModelParameters.load(path, expect)
    return evaluate(make_predictor(params, pcfg), tasks, ar_cap, config, str(path))
