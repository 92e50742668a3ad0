"""Closed-form parameter and FLOP counts.

FLOPs count matrix products only, at two per multiply-add; elementwise ops,
normalisation and softmax are ignored because they are lower order in the
width.  Positional tables are fixed constants, reported apart from the
learnable parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .masking import MaskingConfig
from .predictor import PredictorConfig
from .vit import EncoderConfig


@dataclass
class ModelStats:
    encoder_params: int
    predictor_params: int
    conditioner_params: int
    positional_constants: int
    flops_without_conditioner: int
    flops_with_conditioner: int
    context_tokens: int
    target_tokens: int

    @property
    def overhead_ratio(self):
        return (self.flops_with_conditioner - self.flops_without_conditioner) / self.flops_without_conditioner

    def as_dict(self):
        d = asdict(self)
        d["overhead_ratio"] = self.overhead_ratio
        return d


def _linear(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def block_params(d, mlp_ratio):
    hidden = int(d * mlp_ratio)
    return 2 * (2 * d) + _linear(d, 3 * d) + _linear(d, d) + _linear(d, hidden) + _linear(hidden, d)


def encoder_params(cfg: EncoderConfig):
    return _linear(cfg.patch_dim, cfg.embed_dim) + cfg.depth * block_params(cfg.embed_dim, cfg.mlp_ratio)


def predictor_params(cfg: PredictorConfig, enc_dim):
    pd = cfg.pred_dim
    return (_linear(enc_dim, pd) + pd + cfg.depth * block_params(pd, cfg.mlp_ratio)
            + 2 * pd + _linear(pd, enc_dim))


def conditioner_params(cfg: PredictorConfig):
    pd, dt = cfg.pred_dim, cfg.text_dim
    n_layers = len(cfg.conditioned_layers())
    pool = pd if cfg.fusion == "attention" else 0
    kind = cfg.conditioner
    if kind in ("fine", "holistic"):
        per = (_linear(pd, pd, False) + 2 * _linear(dt, pd, False) + _linear(pd, pd)
               + 2 * pd + _linear(pd, 4 * pd) + _linear(4 * pd, pd) + pool)
        return n_layers * per
    if kind == "adaln":
        return n_layers * (_linear(dt, pd) + _linear(pd, 4 * pd) + pool)
    if kind == "feature":
        w = pd + dt
        return 2 * w + _linear(w, 4 * pd) + _linear(4 * pd, pd) + pool
    if kind == "sequence":
        return _linear(dt, pd) + cfg.depth * pd
    return 0


def _block_flops(tokens, d, mlp_ratio, keys=None):
    keys = tokens if keys is None else keys
    hidden = int(d * mlp_ratio)
    return 2 * (tokens * d * 3 * d + 2 * tokens * keys * d + tokens * d * d + 2 * tokens * d * hidden)


def encoder_flops(cfg: EncoderConfig, tokens):
    return 2 * tokens * cfg.patch_dim * cfg.embed_dim + cfg.depth * _block_flops(tokens, cfg.embed_dim, cfg.mlp_ratio)


def predictor_flops(cfg: PredictorConfig, enc_dim, nc, nt, num_blocks=1):
    """Context embedding (shared by the blocks) plus ``num_blocks`` forwards."""
    pd = cfg.pred_dim
    t = nc + nt
    per_block = cfg.depth * _block_flops(t, pd, cfg.mlp_ratio) + 2 * nt * pd * enc_dim
    return 2 * nc * enc_dim * pd + num_blocks * per_block


def conditioner_flops(cfg: PredictorConfig, nc, nt, n_captions, caption_length):
    """Extra matmul FLOPs of the text path as (once per image, per predictor forward).

    Word keys/values, modulation MLPs and text projections depend only on the
    captions, so they are computed once per image and shared by the target
    blocks.
    """
    pd, dt, n, s = cfg.pred_dim, cfg.text_dim, n_captions, caption_length
    t = nc + nt
    kind = cfg.conditioner
    n_layers = len(cfg.conditioned_layers())
    pool = n * 2 * t * pd if cfg.fusion == "attention" else 0
    if kind in ("fine", "holistic"):
        s_eff = s if kind == "fine" else 1
        once = n_layers * n * 2 * 2 * s_eff * dt * pd           # W_K, W_V
        per = 2 * t * pd * pd                                    # W_Q
        per += n * 2 * 2 * t * s_eff * pd                        # logits and weighted values
        per += n * 2 * (t * pd * pd + 2 * t * pd * 4 * pd)       # W_O and MLP
        if kind == "fine":
            per += n * 2 * t * s * pd                            # cosine similarities
        return once, n_layers * (per + pool)
    if kind == "adaln":
        once = n_layers * n * 2 * (dt * pd + pd * 4 * pd)
        # every conditioned block runs once per caption instead of once
        return once, n_layers * ((n - 1) * _block_flops(t, pd, cfg.mlp_ratio) + pool)
    if kind == "feature":
        return 0, n * 2 * (t * (pd + dt) * 4 * pd + t * 4 * pd * pd) + pool
    if kind == "sequence":
        ns = n * s
        hidden = int(pd * cfg.mlp_ratio)
        text_rows = 2 * (ns * pd * 3 * pd + ns * pd * pd + 2 * ns * pd * hidden)
        # image queries attend a second time over T + N*S keys; text queries over all keys
        attn = 2 * 2 * t * (t + ns) * pd + 2 * 2 * ns * (t + ns) * pd
        return 2 * ns * dt * pd, cfg.depth * (text_rows + attn)
    return 0, 0


def expected_tokens(mask: MaskingConfig, grid_shape):
    """Representative (context, target-block) token counts for a grid."""
    total = grid_shape[0] * grid_shape[1]
    nt = max(1, math.floor(0.5 * sum(mask.target_scale) * total))
    union = min(total, mask.num_targets * nt)
    ctx = math.floor(0.5 * sum(mask.context_scale) * total)
    nc = max(1, ctx - math.floor(union * ctx / total))
    return nc, nt


def model_stats(enc: EncoderConfig, pred: PredictorConfig, mask: MaskingConfig | None = None,
                n_captions=4, caption_length=24, nc=None, nt=None):
    """Per-image forward FLOPs of one training step's networks.

    Counted: the online encoder on the context, the target encoder on every
    patch, and one predictor forward per target block.
    """
    mask = mask or MaskingConfig()
    enc_nc, enc_nt = expected_tokens(mask, enc.grid)
    nc = enc_nc if nc is None else nc
    nt = enc_nt if nt is None else nt
    nb = mask.num_targets
    base = (encoder_flops(enc, nc) + encoder_flops(enc, enc.num_patches)
            + predictor_flops(pred, enc.embed_dim, nc, nt, nb))
    once, per_forward = conditioner_flops(pred, nc, nt, n_captions, caption_length)
    extra = once + nb * per_forward
    return ModelStats(
        encoder_params=encoder_params(enc),
        predictor_params=predictor_params(pred, enc.embed_dim),
        conditioner_params=conditioner_params(pred),
        positional_constants=enc.num_patches * enc.embed_dim + enc.num_patches * pred.pred_dim,
        flops_without_conditioner=base,
        flops_with_conditioner=base + extra,
        context_tokens=nc,
        target_tokens=nt,
    )
