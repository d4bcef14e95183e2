"""Training losses and the cosine-argmax inference rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NORM_EPS, Tensor

IGNORE_ID = 255


def _one_hot(labels: np.ndarray, k: int, ignore_id: int) -> tuple[np.ndarray, np.ndarray]:
    valid = labels != ignore_id
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels contain ids outside [0, {k}): "
                         f"{sorted(np.unique(labels[bad]).tolist())}")
    onehot = np.zeros(labels.shape + (k,))
    idx = np.nonzero(valid)
    onehot[idx + (labels[valid],)] = 1.0
    return onehot, valid


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels."""
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: labels {labels.shape} do not match "
                         f"logits {logits.shape}")
    onehot, valid = _one_hot(labels, k, ignore_id)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    logp = ag.log_softmax(logits, axis=-1)
    return ag.mul(ag.neg(ag.tsum(ag.mul(logp, onehot))), 1.0 / n)


def dice_loss(probs: Tensor, labels: np.ndarray, ignore_id: int = IGNORE_ID,
              eps: float = 1.0) -> Tensor:
    """Macro-averaged soft dice: 1 - mean_k (2*overlap_k + eps)/(sums_k + eps)."""
    k = probs.shape[-1]
    row_sums = probs.data.sum(axis=-1)
    if np.abs(row_sums - 1.0).max() > 1e-4:
        raise ValueError("dice_loss: probabilities do not sum to 1 along classes")
    onehot, valid = _one_hot(labels, k, ignore_id)
    mask = np.repeat(valid.astype(float)[..., None], k, axis=-1)
    p = ag.mul(probs, mask)
    overlap = ag.tsum(ag.mul(p, onehot), axis=tuple(range(probs.ndim - 1)))
    totals = ag.add(ag.tsum(p, axis=tuple(range(probs.ndim - 1))),
                    onehot.sum(axis=tuple(range(probs.ndim - 1))))
    per_class = ag.div(ag.add(ag.mul(overlap, 2.0), eps), ag.add(totals, eps))
    return ag.sub(1.0, ag.tmean(per_class))


@dataclass
class LossBreakdown:
    l_object: float
    l_scene: float
    l_ce: float
    l_dice: float
    l_total: float

    def as_dict(self) -> dict[str, float]:
        return {"l_object": self.l_object, "l_scene": self.l_scene,
                "l_ce": self.l_ce, "l_dice": self.l_dice, "l_total": self.l_total}


def total_loss(l_object, l_scene, l_ce, l_dice) -> LossBreakdown:
    """Unweighted sum of the four loss terms, with the parts kept around."""
    parts = {"l_object": l_object, "l_scene": l_scene, "l_ce": l_ce, "l_dice": l_dice}
    vals = {}
    for name, part in parts.items():
        v = part.item() if isinstance(part, Tensor) else float(part)
        if np.isnan(v):
            raise ValueError(f"total_loss: {name} is NaN")
        vals[name] = v
    total = vals["l_object"] + vals["l_scene"] + vals["l_ce"] + vals["l_dice"]
    return LossBreakdown(l_total=total, **vals)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n2 = (x * x).sum(axis=-1, keepdims=True)
    return x / np.sqrt(np.maximum(n2, NORM_EPS * NORM_EPS))


def similarity_maps(features: np.ndarray | Tensor,
                    class_embs: np.ndarray | Tensor) -> np.ndarray:
    """Per-pixel cosine similarity against each class row, (H, W, K)."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features, float)
    e = class_embs.data if isinstance(class_embs, Tensor) else np.asarray(class_embs, float)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("similarity_maps: need a non-empty (K, C) embedding matrix")
    if f.shape[-1] != e.shape[-1]:
        raise ValueError(f"similarity_maps: channel mismatch {f.shape} vs {e.shape}")
    h, w, c = f.shape
    cos = _unit_rows(f.reshape(h * w, c)) @ _unit_rows(e).T
    return np.clip(cos, -1.0, 1.0).reshape(h, w, e.shape[0])


def infer_mask(features: np.ndarray | Tensor,
               class_embs: np.ndarray | Tensor) -> np.ndarray:
    """Label raster: per pixel, the class of highest cosine similarity.

    Ties go to the lowest class index, so a duplicated class row always
    resolves to its first occurrence.
    """
    return similarity_maps(features, class_embs).argmax(axis=-1).astype(np.int64)
