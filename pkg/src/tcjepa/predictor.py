"""Narrow ViT predictor with text conditioning.

Layout convention: predictor activations are (blocks, B, T, pd) where
``blocks`` indexes the target blocks (one independent forward each, stacked)
and T = |context| + |block|.  Captions are (B, N, S, d_t) with a boolean pad
mask (B, N, S).  Per-caption activations insert an N axis at position 2.

Every text path is built so that at initialisation its output projection is
exactly zero; the conditioned predictor then reproduces the unconditioned one
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor
from .nn import (MLP, Block, LayerNorm, Linear, Module, Parameter, attend,
                 merge_heads, split_heads, trunc_normal)
from .vit import sincos_pos_embed

CONDITIONERS = ("none", "fine", "sequence", "holistic", "adaln", "feature")
FUSIONS = ("max", "avg", "attention")


class ConditionerConfigError(ValueError):
    pass


@dataclass
class PredictorConfig:
    pred_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    conditioner: str = "none"
    fusion: str = "max"
    cond_layers: tuple | None = None
    text_dim: int = 32
    cond_heads: int = 1
    logit_scale: bool = True

    def __post_init__(self):
        if self.conditioner not in CONDITIONERS:
            raise ConditionerConfigError(f"conditioner must be one of {CONDITIONERS}, got {self.conditioner!r}")
        if self.fusion not in FUSIONS:
            raise ConditionerConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.depth < 1:
            raise ConditionerConfigError("predictor depth must be >= 1")
        if self.pred_dim % self.heads or self.pred_dim % self.cond_heads:
            raise ConditionerConfigError("heads must divide pred_dim")
        if self.cond_layers is not None:
            self.cond_layers = tuple(int(v) for v in self.cond_layers)

    def conditioned_layers(self):
        if self.cond_layers is None:
            return tuple(range(self.depth))
        return tuple(sorted(set(self.cond_layers)))


@dataclass
class CaptionBatch:
    """Word embeddings for N captions per image.

    ``embeddings`` is (B, N, S, d_t): row s of caption n is the embedding of
    its s-th token.  ``valid`` is (B, N, S), False at pad positions.
    """

    tokens: np.ndarray
    embeddings: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.embeddings.shape[-2] == 0:
            raise DomainError("captions must have at least one token")
        if self.embeddings.shape[1] == 0:
            raise DomainError("need at least one caption")

    @property
    def num_captions(self):
        return self.embeddings.shape[1]

    @property
    def length(self):
        return self.embeddings.shape[2]

    def holistic(self):
        """Mean of the non-pad word embeddings, (B, N, d_t)."""
        w = self.valid[..., None].astype(self.embeddings.dtype)
        count = np.maximum(w.sum(axis=-2), 1)
        return (self.embeddings * w).sum(axis=-2) / count

    def key_mask(self):
        """Additive logit mask (B, N, S): 0 for words, MASK_LOGIT for pads."""
        return np.where(self.valid, 0.0, ad.MASK_LOGIT).astype(self.embeddings.dtype)

    def subset(self, n):
        return CaptionBatch(self.tokens[:, :n], self.embeddings[:, :n], self.valid[:, :n])


@dataclass
class SimilarityTensor:
    """Rectified patch-word cosines per conditioned layer.

    ``layers[l]`` is a Tensor (blocks, B, N, T, S) still attached to the
    graph; ``rows`` (blocks, B, T) gives the patch id of every row.
    """

    layers: list
    rows: np.ndarray
    valid: np.ndarray

    def stacked(self):
        return ad.stack(self.layers, axis=0)

    def numpy(self):
        return np.stack([o.data for o in self.layers])

    def layer_mean(self):
        return self.numpy().mean(axis=0)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fuse(x, strategy, axis=2, query=None):
    """Combine per-caption features along ``axis``.

    max: elementwise max (ties resolved to the lowest caption index);
    avg: elementwise mean; attention: softmax over captions of
    x_n . query / sqrt(d), then the weighted sum.
    """
    if x.shape[axis] == 0:
        raise DomainError("fusion over zero captions")
    if strategy == "max":
        return ad.reduce(x, "max", axis)
    if strategy not in ("avg", "attention"):
        raise ConditionerConfigError(f"unknown fusion {strategy!r}")
    # Both averages are written as x_0 + sum_n w_n (x_n - x_0), equal to
    # sum_n w_n x_n because the weights sum to one.  When every caption gives
    # the same features (as at initialisation) the result is x_0 exactly,
    # whereas a plain mean of N copies can be off by rounding.
    axis = axis % x.ndim
    first = ad.index(x, (slice(None),) * axis + (slice(0, 1),))
    delta = ad.sub(x, first)
    if strategy == "avg":
        spread = ad.reduce(delta, "mean", axis)
    else:
        if query is None:
            raise ConditionerConfigError("attention fusion needs a pooling query")
        d = x.shape[-1]
        scores = ad.scale(ad.matmul(x, ad.reshape(query, (d, 1))), 1.0 / math.sqrt(d))
        weights = ad.softmax(scores, axis=axis)
        spread = ad.reduce(ad.mul(weights, delta), "sum", axis)
    return ad.add(ad.reshape(first, spread.shape), spread)


def fuse_captions(per_caption, strategy="max", query=None):
    """Fuse a list of N tensors of identical shape (P, d) into one (P, d)."""
    if not per_caption:
        raise DomainError("fuse_captions needs at least one caption")
    return fuse(ad.stack(per_caption, axis=0), strategy, axis=0, query=query)


# ---------------------------------------------------------------------------
# conditioner layers
# ---------------------------------------------------------------------------

class CrossAttentionConditioner(Module):
    """Residual cross-attention from patch rows to word rows, then a residual MLP.

    q' = W_Q q, K = W_K t, V = W_V t;  q <- q + W_O sum_s softmax_s(q'.K_s / sqrt(dh)) V_s;
    q <- q + MLP(LayerNorm(q)).  Also returns O = relu(cos(q', K_s)) with pads at 0.
    """

    def __init__(self, pred_dim, text_dim, rng, heads=1, logit_scale=True, pool_query=False):
        self.heads = heads
        self.logit_scale = logit_scale
        self.w_q = Linear(pred_dim, pred_dim, rng, bias=False)
        self.w_k = Linear(text_dim, pred_dim, rng, bias=False)
        self.w_v = Linear(text_dim, pred_dim, rng, bias=False)
        self.w_o = Linear(pred_dim, pred_dim, rng, zero=True)
        self.norm = LayerNorm(pred_dim)
        self.mlp = MLP(pred_dim, 4 * pred_dim, pred_dim, rng, zero_out=True)
        self.pool_query = Parameter(np.zeros(pred_dim)) if pool_query else None

    def __call__(self, x, words, key_mask, valid=None, fusion="max", similarities=True):
        """x (blocks, B, T, pd); words (B, N, S, d_t); key_mask (B, N, S) additive."""
        if words.shape[-2] == 0:
            raise DomainError("cross-attention over an empty word sequence")
        q = self.w_q(x)                                    # (nb, B, T, pd)
        kw = self.w_k(Tensor(words))                        # (B, N, S, pd)
        vw = self.w_v(Tensor(words))
        nb, b, t, pd = q.shape
        h = self.heads
        qh = ad.reshape(split_heads(q, h), (nb, b, 1, h, t, pd // h))
        kh = split_heads(kw, h)                             # (B, N, h, S, dh)
        vh = split_heads(vw, h)
        logits = ad.matmul(qh, ad.swapaxes(kh, -1, -2))     # (nb, B, N, h, T, S)
        if self.logit_scale:
            logits = ad.scale(logits, 1.0 / math.sqrt(pd // h))
        logits = ad.add(logits, Tensor(key_mask[:, :, None, None, :]))
        att = merge_heads(ad.matmul(ad.softmax(logits, axis=-1), vh))   # (nb, B, N, T, pd)
        xn = ad.add(ad.reshape(x, (nb, b, 1, t, pd)), self.w_o(att))
        xn = ad.add(xn, self.mlp(self.norm(xn)))
        fused = fuse(xn, fusion, axis=2, query=self.pool_query)
        sim = None
        if similarities:
            qn = ad.reshape(ad.normalize(q, axis=-1), (nb, b, 1, t, pd))
            kn = ad.swapaxes(ad.normalize(kw, axis=-1), -1, -2)          # (B, N, pd, S)
            sim = ad.relu(ad.matmul(qn, kn))                             # (nb, B, N, T, S)
            if valid is not None:
                sim = ad.mul(sim, Tensor(valid[:, :, None, :].astype(sim.dtype)))
        return fused, sim


def fine_grained_condition(q_rows, words, layer: CrossAttentionConditioner, valid=None):
    """Single-caption convenience form: q_rows (P, pd), words (S, d_t).

    Returns the updated rows (P, pd) and the similarity slice (P, S).
    """
    words = np.asarray(words)
    if words.shape[0] == 0:
        raise DomainError("empty word sequence")
    if valid is None:
        valid = np.ones(words.shape[0], dtype=bool)
    key_mask = np.where(valid, 0.0, ad.MASK_LOGIT).astype(words.dtype)
    p, pd = q_rows.shape
    x = ad.reshape(q_rows, (1, 1, p, pd))
    out, sim = layer(x, words[None, None], key_mask[None, None], valid[None, None])
    return ad.reshape(out, (p, pd)), ad.reshape(sim, (p, words.shape[0]))


class AdaLNModulation(Module):
    """t_bar -> (shift1, scale1, shift2, scale2) for one predictor block; zero at init."""

    def __init__(self, pred_dim, text_dim, rng):
        self.mlp = MLP(text_dim, pred_dim, 4 * pred_dim, rng, zero_out=True)

    def __call__(self, tbar):
        b, n, _ = tbar.shape
        out = self.mlp(Tensor(tbar))                        # (B, N, 4 pd)
        pd = out.shape[-1] // 4
        out = ad.reshape(out, (1, b, n, 1, 4 * pd))
        return [out[..., i * pd:(i + 1) * pd] for i in range(4)]


class FeatureConditioner(Module):
    """x <- x + MLP(LayerNorm([x, t_bar])) at the predictor input."""

    def __init__(self, pred_dim, text_dim, rng):
        self.norm = LayerNorm(pred_dim + text_dim)
        self.mlp = MLP(pred_dim + text_dim, 4 * pred_dim, pred_dim, rng, zero_out=True)

    def __call__(self, x, tbar, fusion="max", query=None):
        nb, b, t, pd = x.shape
        n, dt = tbar.shape[1], tbar.shape[2]
        xe = ad.broadcast_to(ad.reshape(x, (nb, b, 1, t, pd)), (nb, b, n, t, pd))
        te = Tensor(np.broadcast_to(tbar[None, :, :, None, :], (nb, b, n, t, dt)).copy())
        cat = ad.concat([xe, te], axis=-1)
        xn = ad.add(xe, self.mlp(self.norm(cat)))
        return fuse(xn, fusion, axis=2, query=query)


def gated_sequence_block(blk: Block, gate, x, y, key_mask):
    """One predictor block over [image rows ; text rows].

    Image rows see  plain + gate * (joint - plain), where ``plain`` attends over
    image keys only and ``joint`` over image and text keys.  With gate = 0 the
    image rows follow exactly the unconditioned computation.
    """
    hx = blk.norm1(x)
    hy = blk.norm1(y)
    qx, kx, vx = blk.attn.qkv_heads(hx)
    qy, ky, vy = blk.attn.qkv_heads(hy)
    plain = merge_heads(attend(qx, kx, vx))
    kk = ad.concat([kx, ky], axis=-2)
    vv = ad.concat([vx, vy], axis=-2)
    joint = merge_heads(attend(qx, kk, vv, key_mask))
    mixed = ad.add(plain, ad.mul(gate, ad.sub(joint, plain)))
    x = ad.add(x, blk.attn.proj(mixed))
    y = ad.add(y, blk.attn.proj(merge_heads(attend(qy, kk, vv, key_mask))))
    x = ad.add(x, blk.mlp(blk.norm2(x)))
    y = ad.add(y, blk.mlp(blk.norm2(y)))
    return x, y


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

class Predictor(Module):
    def __init__(self, cfg: PredictorConfig, enc_dim, grid_shape, rng, cond_rng=None):
        self.cfg = cfg
        self.enc_dim = enc_dim
        pd = cfg.pred_dim
        self.embed = Linear(enc_dim, pd, rng)
        self.mask_token = Parameter(trunc_normal(rng, (pd,)))
        self.blocks = [Block(pd, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(pd)
        self.proj = Linear(pd, enc_dim, rng)
        self.pos = sincos_pos_embed(grid_shape, pd)

        # text machinery draws from its own stream so shared weights match the baseline
        cond_rng = cond_rng if cond_rng is not None else np.random.default_rng(0)
        kind = cfg.conditioner
        layers = cfg.conditioned_layers()
        attn_pool = cfg.fusion == "attention"
        self.cross = [None] * cfg.depth
        self.adaln = [None] * cfg.depth
        self.seq_gates = [None] * cfg.depth
        self.seq_proj = None
        self.feature = None
        self.feature_query = None
        if kind in ("fine", "holistic"):
            for l in layers:
                self.cross[l] = CrossAttentionConditioner(
                    pd, cfg.text_dim, cond_rng, heads=cfg.cond_heads,
                    logit_scale=cfg.logit_scale, pool_query=attn_pool)
        elif kind == "adaln":
            for l in layers:
                self.adaln[l] = AdaLNModulation(pd, cfg.text_dim, cond_rng)
        elif kind == "sequence":
            self.seq_proj = Linear(cfg.text_dim, pd, cond_rng, zero=True)
            for l in range(cfg.depth):
                self.seq_gates[l] = Parameter(np.zeros(pd))
        elif kind == "feature":
            self.feature = FeatureConditioner(pd, cfg.text_dim, cond_rng)
            if attn_pool:
                self.feature_query = Parameter(np.zeros(pd))
        self.adaln_query = ([Parameter(np.zeros(pd)) if self.adaln[l] is not None else None
                             for l in range(cfg.depth)] if kind == "adaln" and attn_pool else None)

    def __call__(self, z_x, context_idx, target_idx, captions: CaptionBatch | None = None):
        """Predict target features.

        z_x: Tensor (B, Nc, d) context features; context_idx (B, Nc);
        target_idx (blocks, B, Nt).  Returns (pred (blocks, B, Nt, d), SimilarityTensor | None).
        """
        cfg = self.cfg
        kind = cfg.conditioner
        if kind != "none" and captions is None:
            raise ConditionerConfigError(f"conditioner {kind!r} needs captions")
        context_idx = np.asarray(context_idx)
        target_idx = np.asarray(target_idx)
        nb, b, nt = target_idx.shape
        nc = context_idx.shape[-1]
        pd = cfg.pred_dim

        ctx = ad.add(self.embed(z_x), Tensor(self.pos[context_idx]))
        ctx = ad.broadcast_to(ad.reshape(ctx, (1, b, nc, pd)), (nb, b, nc, pd))
        masks = ad.add(self.mask_token, Tensor(self.pos[target_idx]))
        x = ad.concat([ctx, masks], axis=-2)

        if kind == "feature":
            x = self.feature(x, captions.holistic(), cfg.fusion, self.feature_query)

        y = seq_mask = None
        if kind == "sequence":
            n, s = captions.num_captions, captions.length
            y = self.seq_proj(Tensor(captions.embeddings))                  # (B, N, S, pd)
            y = ad.broadcast_to(ad.reshape(y, (1, b, n * s, pd)), (nb, b, n * s, pd))
            km = captions.key_mask().reshape(b, n * s)
            seq_mask = np.concatenate([np.zeros((b, x.shape[-2]), dtype=km.dtype), km], axis=-1)
            seq_mask = Tensor(seq_mask[:, None, None, :])

        if kind == "fine":
            words, key_mask, valid = captions.embeddings, captions.key_mask(), captions.valid
        elif kind == "holistic":
            words = captions.holistic()[:, :, None, :]
            key_mask = np.zeros(words.shape[:-1], dtype=words.dtype)
            valid = None
        tbar = captions.holistic() if kind == "adaln" else None

        sims = []
        for l, blk in enumerate(self.blocks):
            if kind == "sequence":
                x, y = gated_sequence_block(blk, self.seq_gates[l], x, y, seq_mask)
            elif kind == "adaln" and self.adaln[l] is not None:
                mod = self.adaln[l](tbar)
                t = x.shape[-2]
                xn = blk(ad.reshape(x, (nb, b, 1, t, pd)), mod)
                query = self.adaln_query[l] if self.adaln_query else None
                x = fuse(xn, cfg.fusion, axis=2, query=query)
            else:
                x = blk(x)
            if self.cross[l] is not None:
                x, sim = self.cross[l](x, words, key_mask, valid, cfg.fusion,
                                       similarities=(kind == "fine"))
                if sim is not None:
                    sims.append(sim)

        pred = self.proj(self.norm(x[..., nc:, :]))
        similarity = None
        if kind == "fine":
            rows = np.concatenate([np.broadcast_to(context_idx[None], (nb, b, nc)), target_idx], axis=-1)
            similarity = SimilarityTensor(sims, rows, captions.valid)
        return pred, similarity


def predict(predictor: Predictor, z_x, mask_batch, captions=None):
    """Run the predictor on a :class:`~tcjepa.masking.MaskBatch`."""
    return predictor(z_x, mask_batch.context, mask_batch.targets, captions)


def sequence_condition(predictor: Predictor, z_x, mask_batch, captions):
    if predictor.cfg.conditioner != "sequence":
        raise ConditionerConfigError("predictor is not configured for sequence conditioning")
    pred, _ = predictor(z_x, mask_batch.context, mask_batch.targets, captions)
    return pred


def sequence_length(num_context, block_size, num_captions, caption_length):
    """Tokens processed per block forward by the sequence-conditioned predictor."""
    return num_context + block_size + num_captions * caption_length
