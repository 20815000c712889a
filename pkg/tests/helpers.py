"""Shared test utilities: finite-difference checks and tiny configurations."""

import numpy as np

from fgn import autograd as ag
from fgn.config import ModelConfig, RunConfig


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail):
    """Print one pass/fail line now and again in the terminal summary."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr, eps=1e-6, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)


def gradcheck(build, tensors, eps=1e-6, max_entries=None, rng=None):
    """Max relative error between backprop and central differences.

    ``build()`` returns a scalar Tensor computed from ``tensors``.  With
    ``max_entries`` only a random subset of coordinates per tensor is
    differenced (the error is taken over that subset).
    """
    for t in tensors:
        t.grad = None
    loss = build()
    ag.backward(loss)
    worst = 0.0
    for t in tensors:
        ana = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if max_entries is not None and t.data.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(t.data.size, max_entries, replace=False)
        else:
            idx = np.arange(t.data.size)
        with ag.no_grad():
            num = numeric_grad(lambda: float(build().data), t.data, eps, idx)
        worst = max(worst, rel_error(ana.reshape(-1)[idx], num.reshape(-1)[idx]))
    return worst


def jitter(params, rng, scale=0.05):
    """Move every parameter off its init; zero biases otherwise park ReLU inputs on the kink."""
    for n in params:
        params[n].data += rng.normal(scale=scale, size=params[n].shape)
    return params


def micro_model(**kw):
    base = dict(stage_channels=(4, 4), support_size=16, anchor_scales=(8.0, 12.0), anchor_aspects=(1.0,),
                det_resolution=3, mask_resolution=4, fc_hidden=4, mask_convs=1, dtype="float64",
                norm="none")
    base.update(kw)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def tiny_run(**over):
    """A seconds-fast end-to-end configuration for CLI / training plumbing tests."""
    d = {"model.stage_channels": [8, 8], "model.support_size": 16, "model.anchor_scales": [12, 24],
         "model.anchor_aspects": [1.0], "model.fc_hidden": 8, "model.mask_convs": 1, "model.norm": "none",
         "model.det_resolution": 3, "model.mask_resolution": 4,
         "proposals.pre_nms_train": 50, "proposals.post_nms_train": 16, "proposals.roi_batch": 8,
         "proposals.post_nms_eval": 10, "proposals.rpn_batch": 32,
         "train.stage1_steps": 4, "train.stage2_steps": 2,
         "data.num_images": 40, "data.image_size": 64, "data.size_range": [12, 20]}
    d.update(over)
    return RunConfig().override(d)


_MICRO_CORPUS = {}


def micro_corpus():
    """A 32px shapes corpus sized for :func:`micro_model` (stride 4, anchors 8/12)."""
    if not _MICRO_CORPUS:
        from fgn.dataset import ShapesConfig, generate_shapes_corpus

        cfg = ShapesConfig(num_images=40, image_size=32, size_range=(8, 14), instances_per_image=(1, 2),
                           novel_per_test_image=(1, 2))
        _MICRO_CORPUS["index"] = generate_shapes_corpus(cfg, 0)
    return _MICRO_CORPUS["index"]


def micro_episode(seed=0, n_way=2, k_shot=1):
    from fgn.dataset import sample_training_episode

    return sample_training_episode(micro_corpus().base_view(), n_way, k_shot, np.random.default_rng(seed))


def micro_run(**over):
    """RunConfig matching :func:`micro_model` and :func:`micro_corpus`, in float64."""
    d = {"model.stage_channels": [4, 4], "model.support_size": 16, "model.anchor_scales": [8, 12],
         "model.anchor_aspects": [1.0], "model.det_resolution": 3, "model.mask_resolution": 4,
         "model.fc_hidden": 4, "model.mask_convs": 1, "model.dtype": "float64", "model.norm": "none",
         "proposals.rpn_batch": 32, "proposals.roi_batch": 8, "proposals.pre_nms_train": 100,
         "proposals.post_nms_train": 16, "proposals.post_nms_eval": 10,
         "train.n_way": 2, "train.stage1_steps": 6, "train.stage2_steps": 4,
         "data.num_images": 40, "data.image_size": 32, "data.size_range": [8, 14],
         "data.instances_per_image": [1, 2], "data.novel_per_test_image": [1, 2]}
    d.update(over)
    return RunConfig().override(d)


def full_model_audit(seed, per_tensor=6):
    """Backprop vs central differences over every parameter tensor of the micro model.

    Uses the first episode (from ``seed * 100`` on) with both positive anchors
    and foreground RoIs; sampling and the rejection branch are frozen.
    """
    from fgn import model
    from fgn.backbone import init_parameters
    from fgn.training import weighted_total

    cfg = micro_run()
    params = jitter(init_parameters(cfg.model, seed), np.random.default_rng([seed, 1]))
    for s in range(seed * 100, seed * 100 + 50):
        batch = model.prepare_episode(micro_episode(s), params)
        _, plan = model.forward_losses(params, batch, cfg.proposals, np.random.default_rng(s),
                                       bn_mode="eval", freeze_best=True)
        if plan.rois.fg.size and plan.rpn.num_positive:
            break
    else:
        raise AssertionError(f"no episode with foreground from seed {seed}")

    def total():
        losses, _ = model.forward_losses(params, batch, cfg.proposals, plan=plan, bn_mode="eval", freeze_best=True)
        return weighted_total(losses, cfg.train.loss_weights)

    params.zero_grad()
    ag.backward(total())
    rng = np.random.default_rng(seed)
    ana, num = [], []
    for _, t in params.items():
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        idx = rng.choice(t.data.size, min(per_tensor, t.data.size), replace=False)
        with ag.no_grad():
            fd = numeric_grad(lambda: float(total().data), t.data, 1e-6, idx)
        ana.append(g.reshape(-1)[idx])
        num.append(fd.reshape(-1)[idx])
    return rel_error(np.concatenate(ana), np.concatenate(num))
