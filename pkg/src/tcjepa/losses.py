"""Prediction loss, similarity regularisers, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class LossConfig:
    lam: float = 0.1    # sparsity weight
    beta: float = 0.5   # cross-layer consistency weight
    unique_patches: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("loss coefficients must be non-negative")


@dataclass
class LossBreakdown:
    total: Tensor
    l_predict: float
    l_sparse: float
    l_consistency: float

    def as_row(self):
        return {"l_predict": self.l_predict, "l_sparse": self.l_sparse,
                "l_consistency": self.l_consistency, "total": float(self.total.data)}


def _occurrence_weights(rows, unique):
    """Per-row weights summing to 1 for every image.

    ``rows`` is (..., B, T') of patch ids where the leading axes enumerate
    repeated forwards (target blocks).  Per-occurrence weighting gives each row
    1 / (number of rows of that image); per-unique weighting splits
    1 / (number of distinct patches) evenly over a patch's occurrences.
    """
    rows = np.asarray(rows)
    lead = rows.shape[:-2]
    b = rows.shape[-2]
    per_img = np.moveaxis(rows, -2, 0).reshape(b, -1)
    w = np.empty(per_img.shape, dtype=np.float64)
    for i in range(b):
        if unique:
            ids, inv, counts = np.unique(per_img[i], return_inverse=True, return_counts=True)
            w[i] = 1.0 / (counts[inv] * len(ids))
        else:
            w[i] = 1.0 / per_img.shape[1]
    w = w.reshape((b,) + lead + (rows.shape[-1],))
    return np.moveaxis(w, 0, -2)


def predict_loss(pred, target, unique_patches=False, target_idx=None):
    """Mean over images of the average L2 distance per (block, patch) row.

    ``pred`` and ``target`` are (..., B, K, d); ``target`` must be detached.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    target = target.detach() if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    dist = ad.l2_distance(pred, target)                      # (..., B, K)
    if pred.ndim == 2:
        return ad.reduce(dist, "mean")
    if not unique_patches or target_idx is None:
        return ad.reduce(dist, "mean")
    w = _occurrence_weights(target_idx, True) / dist.shape[-2]
    return ad.reduce(ad.mul(dist, Tensor(w.astype(dist.dtype))), "sum")


def _layer_terms(o, kind):
    """Per-row (1/L) sum_l ||.||_1 for a stack O of shape (L, ..., S)."""
    if kind == "sparse":
        per = ad.reduce(o, "sum", axis=-1)
    else:
        # deviations from the layer mean, measured relative to layer 0 so that
        # identical layers give exactly zero rather than rounding residue
        rel = ad.sub(o, ad.index(o, slice(0, 1)))
        dev = ad.sub(rel, ad.reduce(rel, "mean", axis=0, keepdims=True))
        per = ad.reduce(ad.absolute(dev), "sum", axis=-1)
    return ad.reduce(per, "mean", axis=0)


def _weighted(per_row, weights):
    if weights is None:
        return ad.reduce(per_row, "mean")
    return ad.reduce(ad.mul(per_row, Tensor(np.asarray(weights, dtype=per_row.dtype))), "sum")


def sparsity_loss(o, weights=None):
    """(1/|P|) sum_i (1/L) sum_l ||O_i^l||_1 for O of shape (L, P..., S).

    ``weights`` (broadcastable to the row axes) replaces the uniform 1/|P|.
    """
    o = o if isinstance(o, Tensor) else Tensor(np.asarray(o, dtype=np.float64))
    return _weighted(_layer_terms(o, "sparse"), weights)


def consistency_loss(o, weights=None):
    """(1/|P|) sum_i (1/L) sum_l ||O_i^l - mean_l O_i||_1 for O of shape (L, P..., S)."""
    o = o if isinstance(o, Tensor) else Tensor(np.asarray(o, dtype=np.float64))
    return _weighted(_layer_terms(o, "consistency"), weights)


def similarity_losses(sim, unique_patches=False):
    """Caption-averaged regularisers for a batched SimilarityTensor.

    Each image's rows get weights summing to one; images and captions are
    averaged, giving (1/N) sum_n L^n with L^n the batch mean.
    """
    o = sim.stacked()                                   # (L, nb, B, N, T, S)
    nb, b, n, t = o.shape[1:5]
    w = _occurrence_weights(sim.rows, unique_patches)   # (nb, B, T)
    w = (w[:, :, None, :] / (b * n)).astype(o.dtype)    # (nb, B, 1, T)
    return sparsity_loss(o, w), consistency_loss(o, w)


def total_loss(l_predict, sparse_terms=(), consistency_terms=(), cfg: LossConfig | None = None):
    """l_predict + (lam/N) sum_n sparse^n + (beta/N) sum_n consistency^n.

    ``sparse_terms``/``consistency_terms`` are per-caption scalars (Tensors or
    floats); empty sequences contribute nothing.
    """
    cfg = cfg or LossConfig()
    total = l_predict
    sp = co = 0.0
    if len(sparse_terms):
        s = _mean_terms(sparse_terms)
        sp = float(s.data)
        if cfg.lam:
            total = ad.add(total, ad.scale(s, cfg.lam))
    if len(consistency_terms):
        c = _mean_terms(consistency_terms)
        co = float(c.data)
        if cfg.beta:
            total = ad.add(total, ad.scale(c, cfg.beta))
    return LossBreakdown(total=total, l_predict=float(l_predict.data), l_sparse=sp, l_consistency=co)


def _mean_terms(terms):
    terms = [t if isinstance(t, Tensor) else Tensor(np.float64(t)) for t in terms]
    if len(terms) == 1:
        return terms[0]
    return ad.reduce(ad.stack(terms), "mean")
