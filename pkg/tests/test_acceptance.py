"""Acceptance criteria 1-7, each at its stated tolerance, one pass/fail line per criterion.

Criteria 5 and 6 train the desk preset (about 4-5 minutes per variant on one
CPU core).  Set FGN_ACCEPTANCE_CACHE to a directory to keep the trained
stage-2 states between runs.
"""

import hashlib
import itertools
import json
import math
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from fgn import autograd as ag
from fgn import kernels
from fgn.attention_mask_head import mask_attentive_bank, mask_fcn, mask_loss, predict_mask
from fgn.autograd import Tensor
from fgn.backbone import forward_backbone, init_parameters
from fgn.config import ProposalConfig, preset
from fgn.dataset import (
    ShapesConfig,
    build_finetune_set,
    build_test_tasks,
    crop_support_patch,
    finetune_size,
    generate_shapes_corpus,
    select_novel_support,
)
from fgn.dataset.sampling import crop_window
from fgn.evaluation import (
    average_precision_50,
    average_recall_50,
    evaluate,
    iou,
    oracle_predictor,
)
from fgn.guidance_rpn import aggregate_class_aware, class_attentive_vectors, reweight, rpn_heads, rpn_loss
from fgn.pipeline import VARIANTS, build_protocol, evaluate_params, load_or_generate, train_two_stage, variant_config
from fgn.relation_detector import background_rejection, detection_loss, regress_box, relation_scores
from fgn.roi_ops import masked_pool, roi_align
from fgn.targets import assign_rpn
from fgn import boxes as bx
from fgn.training import TrainState
from helpers import full_model_audit, gradcheck, jitter, micro_corpus, micro_model, record_criterion
from test_dataset import _square_ann, _toy_index
from test_evaluation import ap_oracle
from test_kernels import iou_oracle, nms_oracle, random_boxes, roi_align_oracle
from test_relation_detector import rejection_oracle
from test_roi_ops import pool_oracle

TRIALS = 100
SEEDS = 20


# --- 1. oracle equivalence -----------------------------------------------------------


def _oracle_errors(rng):
    """{check: max abs error over TRIALS random instances}; discrete mismatches count as inf."""
    err = Counter()

    def note(name, value):
        err[name] = max(err[name], float(value))

    for _ in range(TRIALS):
        # class-attentive vectors: a_n = (1/K) sum_k GAP(F_n^k)
        N, K, C = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
        maps = [[rng.normal(size=(rng.integers(1, 5), rng.integers(1, 5), C)) for _ in range(K)] for _ in range(N)]
        got = class_attentive_vectors(maps).data
        for n, c in itertools.product(range(N), range(C)):
            want = sum(sum(f[i, j, c] for i in range(f.shape[0]) for j in range(f.shape[1])) / f[..., c].size
                       for f in maps[n]) / K
            note("eq1 attentive vectors", abs(got[n, c] - want))

        # channel reweighting
        Y, a = rng.normal(size=(3, 4, C)), rng.normal(size=C)
        out = reweight(Y, a).data
        for i, j, c in itertools.product(range(3), range(4), range(C)):
            note("eq2 reweighting", abs(out[i, j, c] - Y[i, j, c] * a[c]))

        # softmax aggregation of the N class-aware objectness scores
        s = rng.normal(scale=5, size=(6, N))
        conf = aggregate_class_aware(s)
        for r in range(6):
            den = sum(math.exp(v) for v in s[r])
            for n in range(N):
                note("AG-RPN softmax", abs(conf[r, n] - math.exp(s[r, n]) / den))

        # NMS
        nb = int(rng.integers(1, 30))
        boxes = random_boxes(rng, nb)
        sc = np.round(rng.uniform(size=nb), int(rng.integers(1, 4)))
        t = float(rng.choice([0.3, 0.5, 0.7]))
        note("NMS", 0.0 if list(kernels.nms(boxes, sc, t)) == nms_oracle(boxes, sc, t) else math.inf)

        # background rejection
        d = np.round(rng.normal(size=(int(rng.integers(1, 6)), 2)), 1)
        note("background rejection", np.abs(background_rejection(d).logits.data - rejection_oracle(d.tolist())).max())

        # masked pooling
        feat, mask = rng.normal(size=(4, 5, 3)), rng.uniform(size=(4, 5))
        mask[rng.integers(4), rng.integers(5)] = 1.0
        note("masked pooling", np.abs(masked_pool(feat, mask).data - pool_oracle(feat, mask)).max())

        # RoIAlign
        fm = rng.normal(size=(6, 7, 2))
        box = random_boxes(rng, 1, size=24.0, min_wh=1.0)[0]
        stride = float(rng.choice([1, 2, 4]))
        got = roi_align(fm, box, 3, 3, stride=stride, sampling=2).data
        note("RoIAlign", np.abs(got - roi_align_oracle(fm, box, 1 / stride, 3, 3, 2)).max())

        # IoU, boxes and masks
        b1, b2 = random_boxes(rng, 2, size=20.0)
        note("IoU", abs(iou(b1, b2) - iou_oracle(b1, b2)))
        m1, m2 = rng.uniform(size=(2, 8, 8)) > 0.5
        m1[0, 0] = True
        note("IoU", abs(iou(m1, m2) - (m1 & m2).sum() / (m1 | m2).sum()))

        # AP50 and AR50
        truth = random_boxes(rng, int(rng.integers(1, 4)), size=30.0, min_wh=3.0)
        preds = np.concatenate([truth[rng.integers(0, len(truth), 3)] + rng.normal(scale=1.5, size=(3, 4)),
                                random_boxes(rng, 3, size=30.0, min_wh=3.0)])
        preds[:, 2:] = np.maximum(preds[:, 2:], preds[:, :2] + 0.5)
        scores = rng.uniform(size=len(preds))
        taken, tp = set(), []
        for i in np.argsort(-scores, kind="stable"):
            ious = [iou_oracle(preds[i], g) if j not in taken else -1 for j, g in enumerate(truth)]
            j = int(np.argmax(ious))
            tp.append(ious[j] >= 0.5)
            if tp[-1]:
                taken.add(j)
        note("AP50", abs(average_precision_50(preds, scores, truth) - ap_oracle(tp, len(truth))))
        cap = int(rng.integers(1, len(preds) + 1))
        top = np.argsort(-scores, kind="stable")[:cap]
        want = np.mean([any(iou_oracle(preds[i], g) >= 0.5 for i in top) for g in truth])
        note("AR50", abs(average_recall_50(preds, scores, truth, cap) - want))
    return err


def test_criterion_1_oracle_equivalence():
    t0 = time.process_time()
    err = _oracle_errors(np.random.default_rng(2024))
    secs = time.process_time() - t0
    worst = max(err.values())
    ok = worst <= 1e-6 and secs <= 120 and len(err) == 10
    detail = f"{len(err)} checks x {TRIALS} instances, max abs err {worst:.1e} (<=1e-6), {secs:.1f}s CPU (<=120s)"
    if not ok:
        detail += f"; per check {dict(err)}"
    assert record_criterion(1, "oracle equivalence", ok, detail)


# --- 2. gradients ------------------------------------------------------------------


def _module_gradchecks(seed):
    rng = np.random.default_rng(seed)
    out = {}

    cfg = micro_model(stage_channels=(3, 3, 3, 3))
    params = jitter(init_parameters(cfg, seed), rng)
    x = Tensor(rng.normal(size=(1, 32, 32, 3)), requires_grad=True)
    g = rng.normal(size=(1, 2, 2, 3))
    tensors = [params[n] for n in params if n.startswith("backbone")] + [x]
    out["backbone"] = gradcheck(lambda: ag.tsum(forward_backbone(x, params) * g), tensors, max_entries=12, rng=rng)

    cfg = micro_model()
    params = jitter(init_parameters(cfg, seed), rng)
    Yt = Tensor(rng.normal(size=(2, 4, 4, cfg.channels)), requires_grad=True)
    anchors = bx.generate_anchors(4, 4, cfg.stride, cfg.anchor_scales, cfg.anchor_aspects)
    gt = np.array([[2.0, 2.0, 12.0, 11.0], [6.0, 5.0, 16.0, 16.0]]) + rng.uniform(-1, 1, (2, 4))
    t = assign_rpn(anchors, gt, np.array([0, 1]), ProposalConfig(rpn_batch=16), rng).as_dict()

    def rpn():
        cls, reg = rpn_loss(*rpn_heads(Yt, params), t, True)
        return cls + reg

    out["rpn heads"] = gradcheck(rpn, [Yt] + [params[n] for n in params if n.startswith("rpn")],
                                 max_entries=12, rng=rng)

    C = cfg.channels
    z = Tensor(rng.normal(size=(3, 3, 3, C)), requires_grad=True)
    reps = Tensor(rng.normal(size=(2, 3, 3, C)), requires_grad=True)
    labels = rng.integers(0, 3, 3)
    targets = rng.normal(scale=0.3, size=(3, 4))
    best = background_rejection(relation_scores(z, reps, params)[0]).best

    def det():
        d, shared = relation_scores(z, reps, params)
        cls, reg = detection_loss(background_rejection(d, best).logits, regress_box(shared, params), labels, targets)
        return cls + reg

    out["relation MLP + rejection"] = gradcheck(det, [z, reps] + [params[n] for n in params if n.startswith("det")],
                                                max_entries=12, rng=rng)

    zm = Tensor(rng.normal(size=(2, 4, 4, C)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, C)), requires_grad=True)
    mt = rng.uniform(size=(2, 8, 8)) > 0.5
    out["AG-FCN incl. b"] = gradcheck(lambda: mask_loss(predict_mask(zm, b, params), mt),
                                      [b, zm] + [params[n] for n in params if n.startswith("mask")],
                                      max_entries=12, rng=rng)
    return out


def test_criterion_2_gradients():
    t0 = time.process_time()
    worst = Counter()
    for seed in range(SEEDS):
        for name, e in _module_gradchecks(seed).items():
            worst[name] = max(worst[name], e)
    audit = max(full_model_audit(seed) for seed in range(SEEDS))
    secs = time.process_time() - t0
    mod = max(worst.values())
    ok = mod <= 1e-4 and audit <= 1e-3 and secs <= 300
    detail = (f"{SEEDS} seeds; worst module rel err {mod:.1e} (<=1e-4) "
              f"[{', '.join(f'{k} {v:.1e}' for k, v in worst.items())}]; "
              f"full-model audit {audit:.1e} (<=1e-3); {secs:.0f}s CPU (<=300s)")
    assert record_criterion(2, "gradient suite", ok, detail)


# --- 3. invariances -------------------------------------------------------------------


def test_criterion_3_invariances():
    rng = np.random.default_rng(3)
    params = init_parameters(micro_model(), 0)
    C = params.config.channels
    fails = []
    worst_equi, worst_norm = 0.0, 0.0
    for trial in range(TRIALS):
        # shot permutation of a_n and b_n, bit-exact
        K = int(rng.integers(2, 6))
        shots = [rng.normal(size=(3, 3, C)) * 10 ** rng.uniform(-3, 3) for _ in range(K)]
        masks = [(rng.uniform(size=(3, 3)) > 0.3) | np.eye(3, dtype=bool) for _ in range(K)]
        perm = rng.permutation(K)
        if not np.array_equal(class_attentive_vectors([shots]).data,
                              class_attentive_vectors([[shots[i] for i in perm]]).data):
            fails.append(f"a_n shot permutation (trial {trial})")
        if not np.array_equal(mask_attentive_bank([shots], [masks]).vectors.data,
                              mask_attentive_bank([[shots[i] for i in perm]], [[masks[i] for i in perm]]).vectors.data):
            fails.append(f"b_n shot permutation (trial {trial})")

        # class permutation: AG-RPN confidences and RG-DET doublets
        N = int(rng.integers(2, 5))
        Y = rng.normal(size=(4, 4, C))
        a = rng.normal(size=(N, C))
        cp = rng.permutation(N)
        obj, _ = rpn_heads(reweight(Y, a), params)
        objp, _ = rpn_heads(reweight(Y, a[cp]), params)
        conf = aggregate_class_aware(np.moveaxis(obj.data, 0, -1))
        confp = aggregate_class_aware(np.moveaxis(objp.data, 0, -1))
        worst_equi = max(worst_equi, np.abs(confp - conf[..., cp]).max())
        z = rng.normal(size=(2, 3, 3, C))
        reps = rng.normal(size=(N, 3, 3, C))
        d, _ = relation_scores(z, reps, params)
        dp, _ = relation_scores(z, reps[cp], params)
        worst_equi = max(worst_equi, np.abs(dp.data - d.data[:, cp]).max())
        mv, mvp = background_rejection(d), background_rejection(dp)
        pos = d.data[..., 0]
        if (np.sort(pos, axis=1)[:, -1] - np.sort(pos, axis=1)[:, -2] > 1e-9).all():  # absent ties
            worst_equi = max(worst_equi, np.abs(mvp.probabilities[:, :N] - mv.probabilities[:, cp]).max())
            worst_equi = max(worst_equi, np.abs(mvp.probabilities[:, N] - mv.probabilities[:, N]).max())

        # guidance identities, bit-exact
        if not np.array_equal(reweight(Y, np.ones(C)).data, Y):
            fails.append("a = ones reweight identity")
        zr = rng.normal(size=(2, 4, 4, C))
        if not np.array_equal(predict_mask(zr, np.ones(C), params).data, mask_fcn(Tensor(zr), params).data):
            fails.append("b = ones AG-FCN identity")

        # normalization of confidence and matching vectors
        worst_norm = max(worst_norm, np.abs(conf.sum(-1) - 1).max(), np.abs(mv.probabilities.sum(-1) - 1).max())
    ok = not fails and worst_equi <= 1e-12 and worst_norm <= 1e-6
    detail = (f"{TRIALS} trials; bit-exact checks failed: {len(fails)}; class-permutation max dev {worst_equi:.1e}; "
              f"softmax sums within {worst_norm:.1e} of 1 (<=1e-6)")
    if fails:
        detail += f"; first failure: {fails[0]}"
    assert record_criterion(3, "invariances", ok, detail)


# --- 4. protocol arithmetic -------------------------------------------------------------


def test_criterion_4_protocol_arithmetic():
    problems = []
    grid = list(itertools.product((1, 2, 3), (1, 2, 3), (2, 3, 5)))
    for N, K, nb in grid:
        rng = np.random.default_rng(N * 100 + K * 10 + nb)
        base_classes = tuple(range(1, nb + 1))
        novel_classes = tuple(range(nb + 1, nb + 1 + N))
        spec, m = {}, 1
        for c in base_classes + novel_classes:
            for _ in range(3 * K + 1):
                spec[m] = [c]
                m += 1
        index = _toy_index(spec, base=base_classes, novel=novel_classes)
        support = select_novel_support(index.restrict(classes=novel_classes), K, rng)
        ft = build_finetune_set(index.restrict(classes=base_classes), support, N, K, rng)
        if not len(ft) == finetune_size(N, K, nb) == (N + 3 * nb) * K:
            problems.append(f"fine-tune size at N={N} K={K} |base|={nb}: {len(ft)}")

    rng = np.random.default_rng(4)
    for _ in range(TRIALS):
        H, W = (int(v) for v in rng.integers(40, 120, 2))
        s = int(rng.integers(4, 20))
        x, y = int(rng.integers(0, W - s)), int(rng.integers(0, H - s))
        ann = _square_ann(1, 1, x, y, s, H=H, W=W)
        want = (max(0, x - 20), max(0, y - 20), min(W, x + s + 20), min(H, y + s + 20))
        if crop_window(ann.box, 20, H, W) != want:
            problems.append(f"crop window {ann.box}")
        patch = crop_support_patch(rng.integers(0, 255, (H, W, 3)).astype(np.uint8), ann)
        if patch.patch.shape[:2] != (want[3] - want[1], want[2] - want[0]):
            problems.append(f"crop patch shape {patch.patch.shape}")

    novel = generate_shapes_corpus(ShapesConfig(num_images=120), seed=4).novel_view()
    for n_way in (1, 2):
        tasks = build_test_tasks(novel, n_way, 1, np.random.default_rng(n_way))
        want = Counter((m, c) for m in novel.image_ids for c in {a.class_id for a in novel.image_instances(m)})
        got = Counter((t.query_id, t.class_map[t.primary_slot]) for t in tasks)
        if got != want or max(got.values()) != 1:
            problems.append(f"task enumeration at N={n_way}")
    ok = not problems
    detail = (f"fine-tune (N+3|C_base|)K on {len(grid)} grid points, 20px clamped crops on {TRIALS} boxes, "
              f"task coverage exactly once; problems: {problems[:3] if problems else 'none'}")
    assert record_criterion(4, "protocol arithmetic", ok, detail)


# --- 5 / 6. desk-scale training -------------------------------------------------------------


class DeskRuns:
    """Trains and evaluates each variant on the desk preset once per session."""

    def __init__(self):
        self.cfg = preset("desk")
        self.protocol = build_protocol(load_or_generate(self.cfg), self.cfg)
        cache = os.environ.get("FGN_ACCEPTANCE_CACHE")
        self.cache = Path(cache) if cache else None
        self.results = {}

    def get(self, name):
        if name not in self.results:
            self.results[name] = self._run(name)
        return self.results[name]

    def _run(self, name):
        cfg = variant_config(self.cfg, name)
        key = hashlib.sha1(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
        ck = self.cache / f"{name}_{key}" if self.cache else None
        t0 = time.process_time()
        if ck is not None and (ck / "state.json").exists():
            state = TrainState.load(ck, expect=cfg.model)
            secs = json.loads((ck / "timing.json").read_text())["train_cpu_s"]
        else:
            state = train_two_stage(cfg, self.protocol)
            secs = time.process_time() - t0
            if ck is not None:
                state.save(ck)
                (ck / "timing.json").write_text(json.dumps({"train_cpu_s": secs}))
        t1 = time.process_time()
        report = evaluate_params(state.params, cfg, self.protocol.tasks)
        return report.aggregates, secs + time.process_time() - t1


@pytest.fixture(scope="module")
def desk():
    return DeskRuns()


def test_criterion_5_synthetic_end_to_end(desk):
    agg, secs = desk.get("FGN")
    cfg = desk.cfg
    ok = (agg["det_map50"] >= 0.60 and agg["seg_map50"] >= 0.50 and secs <= 1800
          and (cfg.train.stage1_steps, cfg.train.stage2_steps) == (600, 200)
          and len(cfg.data.base_classes) == 5 and len(cfg.data.novel_classes) == 2)
    detail = (f"1-way 1-shot on {agg['num_tasks']} novel tasks: det mAP50 {agg['det_map50']:.3f} (>=0.60), "
              f"seg mAP50 {agg['seg_map50']:.3f} (>=0.50); {secs / 60:.1f} min CPU (<=30)")
    assert record_criterion(5, "synthetic end-to-end", ok, detail)


def test_criterion_6_ablation_direction(desk):
    res = {name: desk.get(name)[0] for name in VARIANTS}
    ag_rpn, rpn = 100 * res["FGN"]["ar50"], 100 * res["FGN-DS"]["ar50"]
    seg = {n: 100 * r["seg_map50"] for n, r in res.items()}
    below = {n: v for n, v in seg.items() if n != "FGN" and seg["FGN"] < v - 1.0}
    ok = ag_rpn - rpn >= 10.0 and not below
    detail = (f"AR50 AG-RPN {ag_rpn:.1f} vs RPN {rpn:.1f} (gap {ag_rpn - rpn:+.1f}, need >=10); seg mAP50 "
              + ", ".join(f"{n} {v:.1f}" for n, v in seg.items())
              + (f"; FGN more than 1 point below {sorted(below)}" if below else "; FGN within 1 point of the best"))
    assert record_criterion(6, "ablation direction", ok, detail)


# --- 7. evaluation harness fixtures ------------------------------------------------------------


def test_criterion_7_harness_fixtures():
    A, B, far = [0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0], [50.0, 50.0, 60.0, 60.0]
    checks = {
        "single exact hit": (average_precision_50([A], [0.3], [A]), 1.0),
        "TP FP TP": (average_precision_50([A, far, B], [0.9, 0.8, 0.7], [A, B]), 0.5 * 1.0 + 0.5 * (2 / 3)),
        "FP TP": (average_precision_50([far, A], [0.9, 0.8], [A]), 0.5),
        "duplicate is FP": (average_precision_50([A, A], [0.9, 0.8], [A]), 1.0),
        "all misses": (average_precision_50([[0, 0, 4, 4.0]], [0.9], [A]), 0.0),
        "half overlap miss": (average_precision_50([[5.0, 0.0, 15.0, 10.0]], [0.9], [A]), 0.0),
        "AR both found": (average_recall_50([A, B], [0.1, 0.2], [A, B]), 1.0),
        "AR cap 1": (average_recall_50([A, B], [0.1, 0.2], [A, B], cap=1), 0.5),
        "AR none": (average_recall_50([far], [1.0], [A, B]), 0.0),
    }
    wrong = {k: v for k, (v, want) in checks.items() if v != want}
    tasks = build_test_tasks(micro_corpus().novel_view(), 1, 1, np.random.default_rng(0))
    agg = evaluate(oracle_predictor, tasks, ar_cap=10).aggregates
    oracle_ok = agg["det_map50"] == agg["seg_map50"] == agg["ar50"] == 1.0
    ok = not wrong and oracle_ok
    detail = (f"{len(checks) - len(wrong)}/{len(checks)} hand-computed values exact; injected oracle on "
              f"{agg['num_tasks']} tasks scores det {agg['det_map50']}, seg {agg['seg_map50']}, AR {agg['ar50']}")
    if wrong:
        detail += f"; mismatches {wrong}"
    assert record_criterion(7, "evaluation harness", ok, detail)
