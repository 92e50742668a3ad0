"""A plain I-JEPA step written out in one place, with no text machinery.

It reads the weights of a :class:`~tcjepa.train.TrainState` but performs its
own forward pass, loss and update.  With ``conditioner="none"`` the joint
trainer must reproduce this step bit for bit; tests hold it to that.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import sample_masks
from .train import adamw_update, schedules
from .vit import ema_update, layer_norm_features, patchify


def ijepa_predict(predictor, z_x, context_idx, target_idx):
    """Narrow predictor over [context ; mask tokens] per target block."""
    nb, b, nt = target_idx.shape
    nc = context_idx.shape[-1]
    pd = predictor.cfg.pred_dim
    ctx = ad.add(predictor.embed(z_x), Tensor(predictor.pos[context_idx]))
    ctx = ad.broadcast_to(ad.reshape(ctx, (1, b, nc, pd)), (nb, b, nc, pd))
    masks = ad.add(predictor.mask_token, Tensor(predictor.pos[target_idx]))
    x = ad.concat([ctx, masks], axis=-2)
    for blk in predictor.blocks:
        x = blk(x)
    return predictor.proj(predictor.norm(x[..., nc:, :]))


def ijepa_loss(state, images):
    cfg = state.cfg
    masks = sample_masks(cfg.masking, cfg.encoder.grid, images.shape[0], state.rng)
    patches = patchify(images, cfg.encoder.patch_size)
    z_x = state.pair.online(patches, masks.context)
    with ad.no_grad():
        full = state.pair.target(patches).data
    if cfg.target_norm:
        full = layer_norm_features(full)
    z_y = Tensor(np.take_along_axis(full[None], masks.targets[..., None], axis=-2))
    pred = ijepa_predict(state.predictor, z_x, masks.context, masks.targets)
    return ad.reduce(ad.l2_distance(pred, z_y), "mean")


def ijepa_step(state, images):
    """One baseline update; returns the scalar loss as a float."""
    cfg = state.cfg
    if cfg.predictor.conditioner != "none":
        raise ValueError("the baseline step needs a predictor without a conditioner")
    lr, wd, m = schedules(state.step, cfg.total_steps, cfg)
    loss = ijepa_loss(state, images)
    params = state.trainable()
    for p in params.values():
        p.grad = None
    loss.backward()
    adamw_update(params, {k: p.grad for k, p in params.items()}, state.moments, state.step + 1,
                 lr, wd, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for p in params.values():
        p.grad = None
    ema_update(state.pair, m)
    state.step += 1
    return float(loss.data)
