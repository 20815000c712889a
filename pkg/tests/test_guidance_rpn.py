import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgn import autograd as ag
from fgn import boxes as bx
from fgn.autograd import Tensor
from fgn.backbone import forward_backbone, init_parameters
from fgn.config import ProposalConfig
from fgn.guidance_rpn import (
    aggregate_class_aware,
    class_attentive_vectors,
    reweight,
    rpn_heads,
    rpn_loss,
    select_proposals,
    write_proposals_csv,
)
from fgn.kernels import box_iou
from fgn.targets import assign_rpn
from helpers import gradcheck, micro_model
from test_kernels import nms_oracle, random_boxes


def test_attentive_vector_examples():
    const = np.full((5, 3, 3), 2.0)
    np.testing.assert_array_equal(class_attentive_vectors([[const]]).data, [[2.0, 2.0, 2.0]])
    two = [[np.zeros((4, 4, 3)), np.full((2, 6, 3), 4.0)]]
    np.testing.assert_array_equal(class_attentive_vectors(two).data, [[2.0, 2.0, 2.0]])


def test_attentive_vector_loop_oracle():
    rng = np.random.default_rng(0)
    maps = [[rng.normal(size=(4, 4, 2)) for _ in range(2)] for _ in range(3)]
    got = class_attentive_vectors(maps).data
    for n in range(3):
        for c in range(2):
            total = 0.0
            for k in range(2):
                s = 0.0
                for i in range(4):
                    for j in range(4):
                        s += maps[n][k][i, j, c]
                total += s / 16
            assert abs(got[n, c] - total / 2) <= 1e-7


def test_attentive_vector_shot_permutation_bit_exact():
    rng = np.random.default_rng(1)
    shots = [rng.normal(size=(3, 3, 4)) * 10 ** rng.uniform(-4, 4) for _ in range(5)]
    ref = class_attentive_vectors([shots]).data
    for _ in range(20):
        perm = [shots[i] for i in rng.permutation(5)]
        assert np.array_equal(class_attentive_vectors([perm]).data, ref)


def test_attentive_vector_errors():
    with pytest.raises(ValueError, match="no support shots"):
        class_attentive_vectors([[]])
    with pytest.raises(ValueError, match="channels"):
        class_attentive_vectors([[np.zeros((2, 2, 3))], [np.zeros((2, 2, 4))]])


def test_reweight_examples_and_oracle():
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(3, 4, 5))
    assert np.array_equal(reweight(Y, np.ones(5)).data, Y)
    assert np.all(reweight(Y, np.zeros(5)).data == 0)
    a = rng.normal(size=5)
    out = reweight(Y, a).data
    for i in range(3):
        for j in range(4):
            for c in range(5):
                assert abs(out[i, j, c] - Y[i, j, c] * a[c]) <= 1e-7
    many = reweight(Y, np.stack([a, 2 * a])).data
    assert many.shape == (2, 3, 4, 5)
    np.testing.assert_allclose(many[1], 2 * out)
    with pytest.raises(ValueError, match="channel"):
        reweight(Y, np.ones(4))


def test_rpn_heads_shapes_and_sharing():
    cfg = micro_model()
    params = init_parameters(cfg, 0)
    Yt = np.random.default_rng(0).normal(size=(1, 3, 5, cfg.channels))
    obj, deltas = rpn_heads(np.concatenate([Yt, Yt]), params)
    A = cfg.num_anchors
    assert obj.shape == (2, 3, 5, A) and deltas.shape == (2, 3, 5, A, 4)
    assert np.array_equal(obj.data[0], obj.data[1]) and np.array_equal(deltas.data[0], deltas.data[1])


def test_rpn_head_gradient():
    cfg = micro_model()
    params = init_parameters(cfg, 1)
    rng = np.random.default_rng(3)
    Yt = Tensor(rng.normal(size=(2, 3, 3, cfg.channels)))
    g1, g2 = rng.normal(size=(2, 3, 3, cfg.num_anchors)), rng.normal(size=(2, 3, 3, cfg.num_anchors, 4))

    def f():
        o, d = rpn_heads(Yt, params)
        return ag.tsum(o * g1) + ag.tsum(d * g2)

    assert gradcheck(f, [params[n] for n in params if n.startswith("rpn")]) <= 1e-4


def test_softmax_examples():
    np.testing.assert_array_equal(aggregate_class_aware([[7.3]]), [[1.0]])
    np.testing.assert_allclose(aggregate_class_aware([[0.4, 0.4, 0.4]]), [[1 / 3] * 3], atol=1e-15)
    e = np.exp([1.0, 2.0, 3.0])
    got = aggregate_class_aware([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(got, [e / e.sum()], rtol=1e-12)
    assert np.argmax(got[0]) == 2
    with pytest.raises(ValueError, match="non-finite"):
        aggregate_class_aware([[np.nan, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 10_000))
def test_confidences_are_distributions(n, m, seed):
    s = np.random.default_rng(seed).normal(scale=30, size=(m, n))
    c = aggregate_class_aware(s)
    assert np.all(c >= 0) and np.allclose(c.sum(-1), 1.0, atol=1e-6)


# --- select_proposals -------------------------------------------------------------


def select_oracle(anchors, conf, deltas, thresh, nms_iou, max_out, shape):
    top = np.argmax(conf, axis=1)
    score = conf[np.arange(len(conf)), top]
    keep = [i for i in range(len(conf)) if score[i] >= thresh]
    boxes = []
    for i in keep:
        b = bx.decode(deltas[i, top[i]][None], anchors[i][None])[0]
        boxes.append([min(max(b[0], 0), shape[1]), min(max(b[1], 0), shape[0]),
                      min(max(b[2], 0), shape[1]), min(max(b[3], 0), shape[0])])
    boxes = np.array(boxes).reshape(-1, 4)
    ok = [k for k in range(len(keep)) if boxes[k, 2] - boxes[k, 0] > 1e-3 and boxes[k, 3] - boxes[k, 1] > 1e-3]
    kept = nms_oracle(boxes[ok], score[np.array(keep, dtype=int)[ok]], nms_iou)[:max_out]
    return [tuple(boxes[ok][i]) for i in kept]


def test_select_proposals_matches_bruteforce():
    rng = np.random.default_rng(4)
    for trial in range(30):
        N = int(rng.integers(1, 4))
        anchors = random_boxes(rng, 50, size=40.0)
        conf = aggregate_class_aware(rng.normal(size=(50, N)) * 2)
        deltas = rng.normal(scale=0.2, size=(50, N, 4))
        thresh = 1.0 / N + (0.1 if N > 1 else 0.0)
        got = select_proposals(anchors, conf, deltas, thresh, 0.5, 20, image_shape=(30, 30))
        want = select_oracle(anchors, conf, deltas, thresh, 0.5, 20, (30, 30))
        assert len(got) == len(want), trial
        for p, w in zip(got, want):
            np.testing.assert_allclose(p.box, w, atol=1e-9)
            assert p.top_class == int(np.argmax(p.confidence))
            assert abs(p.confidence.sum() - 1) <= 1e-6


def test_select_single_anchor_unchanged():
    out = select_proposals([[2.0, 3.0, 12.0, 9.0]], [[1.0]], np.zeros((1, 1, 4)), 0.5, 0.7, 10)
    assert len(out) == 1 and out[0].box == (2.0, 3.0, 12.0, 9.0)


def test_select_coincident_boxes():
    anchors = np.array([[0, 0, 10, 10.0], [0, 0, 10, 10.0]])
    conf = np.array([[0.9, 0.1], [0.8, 0.2]])
    out = select_proposals(anchors, conf, np.zeros((2, 2, 4)), 0.5, 0.7, 10)
    assert len(out) == 1 and out[0].confidence[0] == 0.9


def test_select_empty_anchor_set():
    assert select_proposals(np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 2, 4)), 0.5, 0.7, 10) == []


def test_tie_breaks_to_lowest_slot():
    out = select_proposals([[0, 0, 5, 5.0]], [[0.5, 0.5]], np.zeros((1, 2, 4)), 0.5, 0.7, 10)
    assert out[0].top_class == 0


def test_survivors_within_image_and_below_iou():
    rng = np.random.default_rng(5)
    anchors = random_boxes(rng, 200, size=60.0)
    conf = aggregate_class_aware(rng.normal(size=(200, 3)))
    out = select_proposals(anchors, conf, rng.normal(scale=0.5, size=(200, 3, 4)), 1 / 3, 0.6, 500,
                           image_shape=(40, 50))
    b = np.array([p.box for p in out])
    assert (b[:, 0] >= 0).all() and (b[:, 2] <= 50).all() and (b[:, 3] <= 40).all()
    iou = box_iou(b, b)
    np.fill_diagonal(iou, 0)
    assert (iou < 0.6).all()


def test_class_permutation_equivariance():
    rng = np.random.default_rng(6)
    anchors = random_boxes(rng, 60, size=40.0)
    scores = rng.normal(size=(60, 3))
    deltas = rng.normal(scale=0.2, size=(60, 3, 4))
    perm = np.array([2, 0, 1])
    c, cp = aggregate_class_aware(scores), aggregate_class_aware(scores[:, perm])
    np.testing.assert_allclose(cp, c[:, perm], rtol=0, atol=1e-15)
    a = select_proposals(anchors, c, deltas, 1 / 3, 0.7, 100)
    b = select_proposals(anchors, cp, deltas[:, perm], 1 / 3, 0.7, 100)
    np.testing.assert_allclose([p.box for p in a], [p.box for p in b], atol=1e-12)
    assert [perm[p.top_class] for p in b] == [p.top_class for p in a]


def test_proposal_csv(tmp_path):
    out = select_proposals([[2.0, 3.0, 12.0, 9.0]], [[0.7, 0.3]], np.zeros((1, 2, 4)), 0.5, 0.7, 10)
    write_proposals_csv(tmp_path / "p.csv", out)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "x1,y1,x2,y2,conf_1,conf_2"
    assert lines[1].split(",")[-2:] == ["0.700000", "0.300000"]


# --- gradients through the guidance path -------------------------------------------


def test_gradient_wrt_support_pixels():
    cfg = micro_model()
    params = init_parameters(cfg, 7)
    rng = np.random.default_rng(7)
    q = Tensor(rng.normal(size=(1, 16, 16, 3)))
    sup = Tensor(rng.normal(size=(2, 16, 16, 3)), requires_grad=True)  # N=2, K=1
    g = rng.normal(size=(2, 4, 4, cfg.num_anchors))

    def f():
        Y = forward_backbone(q, params)[0]
        F = forward_backbone(sup, params)
        a = class_attentive_vectors([F[0:1], F[1:2]])
        obj, _ = rpn_heads(reweight(Y, a), params)
        return ag.tsum(obj * g)

    assert gradcheck(f, [sup], max_entries=60, rng=rng) <= 1e-4


def test_rpn_loss_gradient():
    cfg = micro_model()
    params = init_parameters(cfg, 8)
    rng = np.random.default_rng(8)
    Yt = Tensor(rng.normal(size=(2, 4, 4, cfg.channels)))
    anchors = bx.generate_anchors(4, 4, cfg.stride, cfg.anchor_scales, cfg.anchor_aspects)
    gt = np.array([[2.0, 2.0, 12.0, 11.0], [6.0, 5.0, 16.0, 16.0]])
    t = assign_rpn(anchors, gt, np.array([0, 1]), ProposalConfig(rpn_batch=16), rng).as_dict()
    assert (t["labels"][t["sampled"]] >= 0).any()
    for guided in (True, False):
        def f():
            obj, d = rpn_heads(Yt, params)
            if not guided:
                obj, d = obj[0:1], d[0:1]
            cls, reg = rpn_loss(obj, d, t, guided)
            return cls + reg

        assert gradcheck(f, [params[n] for n in params if n.startswith("rpn")]) <= 1e-4
