"""Shared feature encoder and the model-wide parameter container.

The encoder is a stack of stages, each a 3x3 convolution, batch
normalization, ReLU and a 2x2 average-pool downsample.  It stands in for a
large pretrained backbone: anything that maps a (B, H, W, 3) batch to a
(B, H/stride, W/stride, C) map through :func:`forward_backbone` with the
same parameter object for query and support can be swapped in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import GUIDED, ConfigError, ModelConfig

# ---------------------------------------------------------------------------
# architecture walk


def backbone_specs(cfg: ModelConfig):
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.stage_channels):
        yield f"backbone.stage{i}.conv.w", (3, 3, cin, cout), ("he", 9 * cin), "rpn"
        yield f"backbone.stage{i}.conv.b", (cout,), ("zeros",), "rpn"
        if cfg.norm == "batch":
            yield f"backbone.stage{i}.bn.gamma", (cout,), ("ones",), "rpn"
            yield f"backbone.stage{i}.bn.beta", (cout,), ("zeros",), "rpn"
        cin = cout


def architecture(cfg: ModelConfig):
    """Ordered (name, shape, init, group) for every learnable array."""
    from .attention_mask_head import mask_head_specs
    from .guidance_rpn import rpn_specs
    from .relation_detector import detector_specs

    yield from backbone_specs(cfg)
    yield from rpn_specs(cfg)
    yield from detector_specs(cfg)
    yield from mask_head_specs(cfg)


def buffer_specs(cfg: ModelConfig):
    if cfg.norm != "batch":
        return
    for i, cout in enumerate(cfg.stage_channels):
        yield f"backbone.stage{i}.bn.mean", (cout,), 0.0
        yield f"backbone.stage{i}.bn.var", (cout,), 1.0


# ---------------------------------------------------------------------------
# parameters


class ModelParameters:
    """Named learnable tensors plus non-learnable buffers (norm statistics)."""

    def __init__(self, tensors, buffers, config: ModelConfig, groups):
        self.tensors = dict(tensors)
        self.buffers = dict(buffers)
        self.config = config
        self.groups = dict(groups)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_parameters(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def manifest(self):
        return [{"name": n, "shape": list(t.shape), "dtype": str(t.dtype), "group": self.groups[n]}
                for n, t in self.tensors.items()]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        tensors = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()}
        return ModelParameters(tensors, {n: b.copy() for n, b in self.buffers.items()},
                               self.config, self.groups)

    def arrays(self):
        out = {n: t.data for n, t in self.tensors.items()}
        out.update({f"buffer:{n}": b for n, b in self.buffers.items()})
        return out

    def save(self, path):
        from dataclasses import asdict

        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.savez(path / "arrays.npz", **self.arrays())
        manifest = {
            "parameters": self.manifest(),
            "buffers": [{"name": n, "shape": list(b.shape), "dtype": str(b.dtype)}
                        for n, b in self.buffers.items()],
            "architecture": {k: list(v) if isinstance(v, tuple) else v
                             for k, v in asdict(self.config).items()},
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None):
        path = Path(path)
        if not (path / "manifest.json").exists():
            raise FileNotFoundError(f"no checkpoint manifest under {path}")
        manifest = json.loads((path / "manifest.json").read_text())
        arch = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["architecture"].items()}
        cfg = ModelConfig(**arch)
        if expect is not None:
            _check_compatible(expect, cfg)
        with np.load(path / "arrays.npz") as z:
            data = {k: z[k] for k in z.files}
        tensors, groups = {}, {}
        for entry in manifest["parameters"]:
            arr = data[entry["name"]]
            if list(arr.shape) != entry["shape"]:
                raise ConfigError(f"checkpoint array {entry['name']} has shape {arr.shape}, "
                                  f"manifest says {entry['shape']}")
            tensors[entry["name"]] = Tensor(arr, requires_grad=True)
            groups[entry["name"]] = entry["group"]
        buffers = {e["name"]: data[f"buffer:{e['name']}"] for e in manifest["buffers"]}
        return cls(tensors, buffers, cfg, groups)


def _check_compatible(a: ModelConfig, b: ModelConfig):
    keys = ("stage_channels", "anchor_scales", "anchor_aspects", "det_resolution", "mask_resolution",
            "fc_hidden", "mask_convs", "norm", "ag_rpn", "rg_det", "ag_fcn", "n_way", "in_channels")
    bad = [k for k in keys if tuple(np.atleast_1d(getattr(a, k))) != tuple(np.atleast_1d(getattr(b, k)))]
    if bad:
        raise ConfigError(f"checkpoint architecture differs from the requested config in: {bad}")


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    tensors, groups = {}, {}
    for name, shape, init, group in architecture(config):
        kind = init[0]
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "he":
            arr = rng.normal(0.0, np.sqrt(2.0 / init[1]), size=shape)
        elif kind == "normal":
            arr = rng.normal(0.0, init[1], size=shape)
        else:
            raise ConfigError(f"unknown initializer {kind!r} for {name}")
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        groups[name] = group
    buffers = {n: np.full(shape, v, dtype=dtype) for n, shape, v in buffer_specs(config)}
    return ModelParameters(tensors, buffers, config, groups)


# ---------------------------------------------------------------------------
# forward


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C)
    stride: int


def normalize_image(img, dtype=np.float64):
    return ((np.asarray(img, dtype=dtype) / 255.0) - 0.5) / 0.25


def pad_to_stride(img, stride):
    h, w = img.shape[:2]
    ph, pw = (-h) % stride, (-w) % stride
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw)) + ((0, 0),) * (img.ndim - 2))


def batch_norm(x, params, prefix, mode, momentum, eps):
    gamma, beta = params[prefix + ".gamma"], params[prefix + ".beta"]
    if mode == "eval":
        mu = params.buffers[prefix + ".mean"]
        var = params.buffers[prefix + ".var"]
        scale = gamma * (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        return (x - mu.astype(x.dtype)) * scale + beta
    axes = (0, 1, 2)
    mu = ag.mean(x, axes, keepdims=True)
    xc = x - mu
    var = ag.mean(xc * xc, axes, keepdims=True)
    xhat = xc * ag.power(var + eps, -0.5)
    if mode == "train":
        n = x.data.size / x.shape[-1]
        bm, bv = params.buffers[prefix + ".mean"], params.buffers[prefix + ".var"]
        bm *= 1.0 - momentum
        bm += momentum * mu.data.ravel()
        bv *= 1.0 - momentum
        bv += momentum * var.data.ravel() * n / max(n - 1.0, 1.0)
    return xhat * gamma + beta


def forward_backbone(x: Tensor, params: ModelParameters, bn_mode="eval") -> Tensor:
    """(B, H, W, in_channels) -> (B, H/stride, W/stride, C)."""
    cfg = params.config
    if x.ndim != 4:
        raise ConfigError(f"backbone expects a (B, H, W, C) batch, got shape {x.shape}")
    if x.shape[-1] != cfg.in_channels:
        raise ConfigError(f"image has {x.shape[-1]} channels, first layer expects {cfg.in_channels}")
    if x.shape[1] % cfg.stride or x.shape[2] % cfg.stride:
        raise ConfigError(f"input {x.shape[1]}x{x.shape[2]} not divisible by stride {cfg.stride}")
    for i in range(len(cfg.stage_channels)):
        p = f"backbone.stage{i}"
        x = ag.conv2d(x, params[p + ".conv.w"], params[p + ".conv.b"])
        if cfg.norm == "batch":
            x = batch_norm(x, params, p + ".bn", bn_mode, cfg.bn_momentum, cfg.bn_eps)
        x = ag.relu(x)
        B, H, W, C = x.shape
        x = ag.mean(ag.reshape(x, (B, H // 2, 2, W // 2, 2, C)), (2, 4))
    return x


def encode(image, params: ModelParameters) -> FeatureMap:
    """Inference-mode encoding of one (H, W, 3) uint8 image."""
    cfg = params.config
    x = normalize_image(image, np.dtype(cfg.dtype))[None]
    with ag.no_grad():
        y = forward_backbone(Tensor(x), params, "eval")
    return FeatureMap(y.data[0], cfg.stride)


def is_guided(cfg: ModelConfig, part):
    return getattr(cfg, part) == GUIDED
