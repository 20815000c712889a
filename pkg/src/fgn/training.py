"""Two-stage episodic training: SGD with momentum over per-group learning rates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import boxes as bx
from .backbone import ModelParameters
from .config import RunConfig
from .dataset.sampling import sample_training_episode
from .dataset.types import AnnotationIndex, Episode
from .model import LOSS_NAMES, forward_losses, prepare_episode
from .targets import assign_rois, assign_rpn, label_anchors

log = logging.getLogger(__name__)

__all__ = [
    "LossBundle", "NonFiniteLoss", "StageContractError", "StageSchedule", "TrainState",
    "assign_targets", "check_stage_data", "run_stage", "stage_schedule", "train_step",
]


class NonFiniteLoss(RuntimeError):
    pass


class StageContractError(ValueError):
    pass


@dataclass
class LossBundle:
    rpn_cls: float
    rpn_reg: float
    det_cls: float
    det_reg: float
    mask: float
    weights: dict = field(default_factory=lambda: dict.fromkeys(LOSS_NAMES, 1.0))

    @property
    def total(self):
        return float(sum(self.weights[n] * getattr(self, n) for n in LOSS_NAMES))

    def as_dict(self):
        d = {n: getattr(self, n) for n in LOSS_NAMES}
        d["total"] = self.total
        return d

    @classmethod
    def from_tensors(cls, losses, weights):
        return cls(**{n: float(losses[n].data) for n in LOSS_NAMES}, weights=dict(weights))


def weighted_total(losses, weights):
    """Differentiable sum_i w_i * L_i over the named loss tensors."""
    total = None
    for n in LOSS_NAMES:
        term = losses[n] * float(weights[n])
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# schedule


@dataclass
class StageSchedule:
    stage: int
    steps: int
    base_lr: dict  # group -> initial lr
    decay: float = 0.1

    @property
    def decay_after(self):
        return self.steps // 2

    def lr(self, step):
        """Learning rates for 1-based ``step``; the second half runs at ``decay`` x."""
        f = self.decay if step > self.decay_after else 1.0
        return {g: v * f for g, v in self.base_lr.items()}

    def array(self, group):
        s = np.arange(1, self.steps + 1)
        return np.where(s > self.decay_after, self.base_lr[group] * self.decay, self.base_lr[group])


def stage_schedule(cfg: RunConfig, stage: int) -> StageSchedule:
    t = cfg.train
    scale = 1.0 if stage == 1 else t.stage2_lr_scale
    steps = t.stage1_steps if stage == 1 else t.stage2_steps
    return StageSchedule(stage, steps, {"rpn": t.lr_rpn * scale, "heads": t.lr_heads * scale})


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    params: ModelParameters
    step: int = 0
    stage: int = 1
    learning_rate: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    skipped: int = 0

    @classmethod
    def fresh(cls, params, seed):
        return cls(params, rng=np.random.default_rng([seed, 1]))

    def save(self, path):
        path = Path(path)
        self.params.save(path)
        np.savez(path / "velocity.npz", **self.velocity)
        meta = {"step": self.step, "stage": self.stage, "learning_rate": self.learning_rate,
                "skipped": self.skipped, "rng": self.rng.bit_generator.state}
        (path / "state.json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path, expect=None):
        path = Path(path)
        params = ModelParameters.load(path, expect)
        meta = json.loads((path / "state.json").read_text()) if (path / "state.json").exists() else {}
        velocity = {}
        if (path / "velocity.npz").exists():
            with np.load(path / "velocity.npz") as z:
                velocity = {k: z[k] for k in z.files}
        rng = np.random.default_rng()
        if "rng" in meta:
            rng.bit_generator.state = meta["rng"]
        return cls(params, meta.get("step", 0), meta.get("stage", 1), meta.get("learning_rate", {}),
                   velocity, rng, meta.get("skipped", 0))


# ---------------------------------------------------------------------------
# steps


def assign_targets(episode: Episode, params: ModelParameters, proposals, cfg: RunConfig, rng):
    """Anchor and RoI/mask targets for an episode given proposal boxes."""
    batch = prepare_episode(episode, params)
    mc = params.config
    h, w = batch.query.shape[1] // mc.stride, batch.query.shape[2] // mc.stride
    anchors = bx.generate_anchors(h, w, mc.stride, mc.anchor_scales, mc.anchor_aspects)
    rpn_t = assign_rpn(anchors, batch.gt_boxes, batch.gt_slots, cfg.proposals, rng)
    roi_t = assign_rois(proposals, batch.gt_boxes, batch.gt_slots, batch.gt_masks, batch.n_way,
                        cfg.proposals, mc.mask_size, rng)
    return rpn_t, roi_t


def _has_foreground(batch, params, cfg):
    mc = params.config
    h, w = batch.query.shape[1] // mc.stride, batch.query.shape[2] // mc.stride
    anchors = bx.generate_anchors(h, w, mc.stride, mc.anchor_scales, mc.anchor_aspects)
    labels, _ = label_anchors(anchors, batch.gt_boxes, batch.gt_slots, cfg.proposals.rpn_pos_iou,
                              cfg.proposals.rpn_neg_iou)
    return bool(np.any(labels >= 0))


def _sgd(state: TrainState, lrs, cfg: RunConfig, frozen=()):
    """Clip by global norm, then momentum SGD; ``frozen`` lists name prefixes left untouched."""
    t = cfg.train
    params = state.params
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    scale = t.clip_norm / norm if t.clip_norm and norm > t.clip_norm else 1.0
    decay = t.stage2_weight_decay if state.stage == 2 and t.stage2_weight_decay is not None else t.weight_decay
    for n, p in params.items():
        if n.split(".")[0] in frozen:
            continue
        g = grads[n] * scale
        if decay and n.endswith(".w"):
            g = g + decay * p.data
        v = state.velocity.get(n)
        v = g if v is None else t.momentum * v + g
        state.velocity[n] = v.astype(p.dtype)
        p.data = p.data - lrs[params.groups[n]] * state.velocity[n]
    return norm


def _frozen_groups(cfg, stage):
    return ("backbone",) if stage == 2 and cfg.train.freeze_backbone_stage2 else ()


def train_step(state: TrainState, episodes, cfg: RunConfig, schedule: StageSchedule | None = None):
    """One SGD update from an episode (or a list averaged into one step).

    Returns (state, LossBundle), or (state, None) when no episode had a
    foreground anchor and the step was skipped.
    """
    params = state.params
    if isinstance(episodes, Episode):
        episodes = [episodes]
    batches = []
    for ep in episodes:
        batch = prepare_episode(ep, params)
        if _has_foreground(batch, params, cfg):
            batches.append((ep, batch))
        else:
            state.skipped += 1
            log.debug("episode %s has no foreground anchor; skipped (%d so far)", ep.query_id, state.skipped)
    if not batches:
        return state, None
    schedule = schedule or stage_schedule(cfg, state.stage)
    lrs = schedule.lr(state.step + 1)
    bn_mode = "train" if state.stage == 1 else "eval"
    weights = cfg.train.loss_weights
    params.zero_grad()
    sums = dict.fromkeys(LOSS_NAMES, 0.0)
    for ep, batch in batches:
        try:
            losses, _ = forward_losses(params, batch, cfg.proposals, state.rng, bn_mode=bn_mode)
        except ag.NonFiniteError as e:
            raise NonFiniteLoss(f"non-finite forward pass at stage {state.stage} step {state.step + 1}, "
                                f"episode query {ep.query_id}: {e}") from e
        bundle = LossBundle.from_tensors(losses, weights)
        if not all(math.isfinite(v) for v in bundle.as_dict().values()):
            raise NonFiniteLoss(f"non-finite loss at stage {state.stage} step {state.step + 1}, "
                                f"episode query {ep.query_id}: {bundle.as_dict()}")
        ag.backward(weighted_total(losses, weights) * (1.0 / len(batches)))
        for n in LOSS_NAMES:
            sums[n] += getattr(bundle, n) / len(batches)
    _sgd(state, lrs, cfg, _frozen_groups(cfg, state.stage))
    params.zero_grad()
    state.step += 1
    state.learning_rate = lrs
    return state, LossBundle(**sums, weights=dict(weights))


def check_stage_data(index: AnnotationIndex, stage: int):
    if stage == 1:
        novel = set(index.novel_classes) & set(index.classes)
        if novel:
            raise StageContractError(f"stage 1 trains on base data only; index holds novel classes {sorted(novel)}")
    elif stage != 2:
        raise StageContractError(f"unknown stage {stage}")


def run_stage(state: TrainState, index: AnnotationIndex, cfg: RunConfig, stage: int, out_dir=None,
              observer=None, max_consecutive_skips=200) -> TrainState:
    """Run one training stage; ``observer(episode)`` sees every episode that takes a gradient step."""
    check_stage_data(index, stage)
    state.stage, state.step = stage, 0
    schedule = stage_schedule(cfg, stage)
    t = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train_log.jsonl", "a")
    try:
        skips = 0
        while state.step < schedule.steps:
            eps = [sample_training_episode(index, t.n_way, t.k_shot, state.rng, cfg.model.margin_px,
                                           allow_self_support=(stage == 2))
                   for _ in range(t.episodes_per_step)]
            state, bundle = train_step(state, eps, cfg, schedule)
            if bundle is None:
                skips += 1
                if skips > max_consecutive_skips:
                    raise StageContractError("no episode with a foreground anchor; check anchor templates")
                continue
            skips = 0
            if observer is not None:
                for ep in eps:
                    observer(ep)
            if logf is not None and state.step % max(t.log_every, 1) == 0:
                rec = {"step": state.step, "stage": stage, "lr": state.learning_rate, **bundle.as_dict()}
                logf.write(json.dumps(rec) + "\n")
            if out is not None and t.checkpoint_every and state.step % t.checkpoint_every == 0:
                state.save(out / f"stage{stage}_step{state.step:06d}")
        if out is not None:
            state.save(out / f"stage{stage}_final")
    finally:
        if logf is not None:
            logf.close()
    return state
