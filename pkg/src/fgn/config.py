"""Configuration dataclasses and JSON (de)serialization.

Every default lives here; a run's resolved configuration is the merge of
these defaults, a JSON file and command-line overrides, and is echoed into
every artifact the run writes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .dataset.shapes import ShapesConfig

GUIDED, UNGUIDED = "guided", "unguided"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    # one entry per stage (3x3 conv, norm, ReLU, 2x downsample); the last is C
    stage_channels: tuple = (64, 64, 64, 64)
    norm: str = "batch"  # "batch" or "none"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    anchor_scales: tuple = (32.0, 64.0, 128.0)
    anchor_aspects: tuple = (0.5, 1.0, 2.0)
    det_resolution: int = 7
    mask_resolution: int = 14
    sampling_ratio: int = 2
    fc_hidden: int = 128
    mask_convs: int = 4
    support_size: int = 192
    margin_px: int = 20
    n_way: int = 1  # width of the unguided (N+1)-way classifier
    dtype: str = "float32"
    ag_rpn: str = GUIDED
    rg_det: str = GUIDED
    ag_fcn: str = GUIDED

    @property
    def channels(self):
        return int(self.stage_channels[-1])

    @property
    def stride(self):
        return 2 ** len(self.stage_channels)

    @property
    def num_anchors(self):
        return len(self.anchor_scales) * len(self.anchor_aspects)

    @property
    def mask_size(self):
        return 2 * self.mask_resolution

    def validate(self):
        if not self.stage_channels:
            raise ConfigError("stage_channels must name at least one stage")
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"norm must be 'batch' or 'none', got {self.norm!r}")
        for name in ("ag_rpn", "rg_det", "ag_fcn"):
            if getattr(self, name) not in (GUIDED, UNGUIDED):
                raise ConfigError(f"{name} must be 'guided' or 'unguided'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class ProposalConfig:
    nms_iou: float = 0.7
    score_thresh: float | None = None  # None -> 1/N, the uniform-confidence floor
    pre_nms_train: int = 600
    post_nms_train: int = 256
    pre_nms_eval: int = 300
    post_nms_eval: int = 100
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    det_nms_iou: float = 0.5
    max_detections: int = 100
    rpn_box_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    det_box_weights: tuple = (10.0, 10.0, 5.0, 5.0)


@dataclass
class TrainConfig:
    n_way: int = 1
    k_shot: int = 1
    stage1_steps: int = 600
    stage2_steps: int = 200
    episodes_per_step: int = 1  # gradients of this many episodes are averaged per update
    lr_rpn: float = 0.01  # backbone + AG-RPN group
    lr_heads: float = 0.001  # RG-DET + AG-FCN group
    stage2_lr_scale: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    stage2_weight_decay: float | None = None  # None -> weight_decay; fine-tuning on N x K shots overfits fast
    clip_norm: float = 10.0
    loss_weights: dict = field(default_factory=lambda: {
        "rpn_cls": 1.0, "rpn_reg": 1.0, "det_cls": 1.0, "det_reg": 1.0, "mask": 1.0})
    freeze_backbone_stage2: bool = False
    checkpoint_every: int = 0  # 0 -> only at stage end
    log_every: int = 1


@dataclass
class EvalConfig:
    n_way: int = 1
    k_shot: int = 1
    ar_cap: int = 100  # proposals considered per task for AR50


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: ShapesConfig = field(default_factory=ShapesConfig)
    seed: int = 0

    def validate(self):
        self.model.validate()
        try:
            self.data.validate()
        except ValueError as e:
            raise ConfigError(f"data: {e}") from e
        if self.eval.n_way < 1 or self.eval.k_shot < 1 or self.train.n_way < 1 or self.train.k_shot < 1:
            raise ConfigError("n_way and k_shot must be positive")
        if self.model.rg_det == UNGUIDED and self.model.n_way != self.train.n_way:
            raise ConfigError("unguided classifier width model.n_way must equal train.n_way")
        return self

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, d.get("model", {})),
            proposals=_build(ProposalConfig, d.get("proposals", {})),
            train=_build(TrainConfig, d.get("train", {})),
            eval=_build(EvalConfig, d.get("eval", {})),
            data=_build(ShapesConfig, d.get("data", {})),
            seed=int(d.get("seed", 0)),
        ).validate()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e

    def override(self, dotted: dict):
        """Apply ``{"train.stage1_steps": 10, ...}`` overrides; returns a new config."""
        d = self.to_dict()
        for key, value in dotted.items():
            node = d
            *head, last = key.split(".")
            for h in head:
                if h not in node or not isinstance(node[h], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[h]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = value
        return RunConfig.from_dict(d)


# Calibrated desk-scale run: 64px-wide 3-stage backbone on the 300-image shapes corpus.
DESK = {
    "model.stage_channels": [32, 32, 32], "model.support_size": 64, "model.anchor_scales": [20, 28, 40],
    "model.fc_hidden": 64, "model.mask_convs": 2, "model.norm": "none",
    "proposals.pre_nms_train": 300, "proposals.post_nms_train": 64, "proposals.roi_batch": 32,
    "proposals.post_nms_eval": 30, "eval.ar_cap": 10, "data.num_images": 300,
    "train.lr_heads": 0.01, "train.episodes_per_step": 4, "train.stage2_weight_decay": 1e-3,
}

PRESETS = {"desk": DESK}


def preset(name) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig().override(PRESETS[name])


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d):
    if is_dataclass(d):
        return d
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)
