"""Attention-guided mask head.

Masked-pooled support features give one vector b_n per class; the selector
picks b_{n*} (ground-truth class when training, predicted class at test
time) and the RoI features are reweighted by it before the FCN stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .config import ModelConfig
from .roi_ops import masked_pool_or_gap


def mask_head_specs(cfg: ModelConfig):
    C = cfg.channels
    for i in range(cfg.mask_convs):
        yield f"mask.conv{i}.w", (3, 3, C, C), ("he", 9 * C), "heads"
        yield f"mask.conv{i}.b", (C,), ("zeros",), "heads"
    yield "mask.up.w", (C, 4 * C), ("he", C), "heads"
    yield "mask.up.b", (4 * C,), ("zeros",), "heads"
    yield "mask.out.w", (C, 1), ("normal", 0.01), "heads"
    yield "mask.out.b", (1,), ("zeros",), "heads"


@dataclass
class MaskAttentiveBank:
    vectors: Tensor  # (N, C)
    provenance: list = field(default_factory=list)  # per class: contributing shot ids

    def __len__(self):
        return self.vectors.shape[0]


def mask_attentive_bank(support_aligned, support_masks, provenance=None) -> MaskAttentiveBank:
    """b_n = (1/K) sum_k masked_pool(F_n^k, m_n^k); empty masks fall back to GAP."""
    if len(support_aligned) != len(support_masks):
        raise ValueError("features and masks disagree on the number of classes")
    vecs = []
    for n, (feats, masks) in enumerate(zip(support_aligned, support_masks)):
        if len(feats) != len(masks) or len(feats) == 0:
            raise ValueError(f"class slot {n}: {len(feats)} feature maps vs {len(masks)} masks")
        pooled = ag.stack([masked_pool_or_gap(feats[k], masks[k]) for k in range(len(masks))])
        vecs.append(ag.sorted_mean(pooled, 0))
    if provenance is None:
        provenance = [list(range(len(m))) for m in support_masks]
    return MaskAttentiveBank(ag.stack(vecs), provenance)


def select_vector(bank, class_slot) -> Tensor:
    """Return b_{class_slot} (0-based slot); the background slot N is rejected."""
    vectors = bank.vectors if isinstance(bank, MaskAttentiveBank) else as_tensor(bank)
    N = vectors.shape[0]
    slot = int(class_slot)
    if slot == N:
        raise ValueError("background slot has no attentive vector; the mask head is not run for background")
    if not 0 <= slot < N:
        raise ValueError(f"class slot {slot} outside 0..{N - 1}")
    return vectors[slot]


def mask_fcn(x, params):
    """Unguided FCN stack: (R, h, w, C) -> (R, 2h, 2w) logits."""
    cfg = params.config
    for i in range(cfg.mask_convs):
        x = ag.relu(ag.conv2d(x, params[f"mask.conv{i}.w"], params[f"mask.conv{i}.b"]))
    R, h, w, C = x.shape
    up = ag.linear(x, params["mask.up.w"], params["mask.up.b"])  # (R, h, w, 4C)
    up = ag.reshape(up, (R, h, w, 2, 2, C))
    up = ag.reshape(ag.transpose(up, (0, 1, 3, 2, 4, 5)), (R, 2 * h, 2 * w, C))
    up = ag.relu(up)
    out = ag.linear(up, params["mask.out.w"], params["mask.out.b"])
    return ag.reshape(out, (R, 2 * h, 2 * w))


def predict_mask(z, b, params) -> Tensor:
    """Mask logits for RoI features ``z`` reweighted channel-wise by ``b``."""
    z, b = as_tensor(z), as_tensor(b)
    single = z.ndim == 3
    if single:
        z = ag.reshape(z, (1,) + z.shape)
    if b.shape[-1] != z.shape[-1]:
        raise ValueError(f"channel mismatch: RoI features have {z.shape[-1]}, vector has {b.shape[-1]}")
    if b.ndim == 1:
        b = ag.reshape(b, (1, 1, 1, b.shape[0]))
    else:
        b = ag.reshape(b, (b.shape[0], 1, 1, b.shape[1]))
    out = mask_fcn(z * b, params)
    return out[0] if single else out


def mask_loss(logits, targets):
    return ag.bce_with_logits(logits, np.asarray(targets, dtype=logits.dtype), "mean")
