"""Export of patch-word similarity maps and per-block prediction errors as JSON."""

from __future__ import annotations

import dataclasses
import json
from importlib import resources

import numpy as np

from . import autodiff as ad
from .data import SyntheticDataset
from .masking import sample_masks
from .predictor import ConditionerConfigError
from .vit import encode_context, encode_target

FORMAT = "tcjepa-maps-v1"


def load_schema():
    return json.loads(resources.files("tcjepa").joinpath("schemas/maps.schema.json").read_text())


def export_maps(state, sample_seed, dataset=None):
    """Similarity records for one image drawn by ``sample_seed``.

    Every predictor forward (one per target block) yields, per conditioned
    layer, a score vector over the S word slots for each of its rows (context
    and target patches) and caption.  The layer mean is exported alongside.
    """
    cfg = state.cfg
    if cfg.predictor.conditioner != "fine":
        raise ConditionerConfigError(
            f"similarity maps need the fine conditioner, checkpoint uses {cfg.predictor.conditioner!r}")
    dataset = dataset or SyntheticDataset(dataclasses.replace(cfg.data))
    rng = np.random.default_rng(np.random.SeedSequence([sample_seed, 0x3A95]))
    item = int(rng.integers(len(dataset)))
    images, captions, labels = dataset.batch(np.array([item]), np.dtype(cfg.dtype).type)
    masks = sample_masks(cfg.masking, cfg.encoder.grid, 1, rng)
    with ad.no_grad():
        z_x = encode_context(state.pair, images, masks.context).features
        z_y = encode_target(state.pair, images, masks.targets, normalize=cfg.target_norm).features
        pred, sim = state.predictor(z_x, masks.context, masks.targets, captions)
    o = sim.numpy().astype(np.float64)                  # (L, nb, 1, N, T, S)
    o_mean = o.mean(axis=0)
    err = np.sqrt(((pred.data.astype(np.float64) - z_y.data) ** 2).sum(-1)).mean(-1)[:, 0]
    layers = cfg.predictor.conditioned_layers()
    n_layers, nb, _, n_cap, t, s = o.shape
    rows = sim.rows[:, 0]                               # (nb, T)
    n_ctx = masks.context.shape[-1]
    records, mean_records = [], []
    for k in range(nb):
        for i in range(t):
            role = "context" if i < n_ctx else "target"
            for n in range(n_cap):
                base = {"block": k, "patch_index": int(rows[k, i]), "role": role, "caption_index": n}
                for li in range(n_layers):
                    records.append({**base, "layer": int(layers[li]), "scores": o[li, k, 0, n, i].tolist()})
                mean_records.append({**base, "scores": o_mean[k, 0, n, i].tolist()})
    return {
        "format": FORMAT,
        "sample_seed": int(sample_seed),
        "item": item,
        "label": int(labels[0]),
        "grid": list(cfg.encoder.grid),
        "layers": [int(v) for v in layers],
        "caption_tokens": captions.tokens[0].tolist(),
        "valid": captions.valid[0].tolist(),
        "context": masks.context[0].tolist(),
        "targets": masks.targets[:, 0].tolist(),
        "records": records,
        "layer_mean": mean_records,
        "block_errors": [{"block": k, "l2_error": float(err[k])} for k in range(nb)],
    }
