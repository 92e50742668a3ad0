"""Finite-difference checks of every differentiable op and of the full training loss.

Everything runs in float64.  Inputs are drawn away from kinks (relu at 0,
|x| at 0, ties in max) so central differences are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .data import PAD
from .losses import LossConfig, consistency_loss, predict_loss, similarity_losses, sparsity_loss, total_loss
from .nn import attend
from .predictor import CONDITIONERS, CaptionBatch, Predictor, PredictorConfig, fuse
from .vit import EncoderConfig, EncoderPair, encode_context, encode_target


@dataclass
class CheckResult:
    name: str
    ok: bool
    max_rel_err: float
    seconds: float


def _t(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        # keep magnitudes above ``lo`` so kinks at 0 are out of reach of h
        x = np.sign(x) * (np.abs(x) + lo)
    return Tensor(x, dtype=np.float64)


def _weighted(out, w):
    return ad.reduce(ad.mul(out, Tensor(w)), "sum")


def op_cases(rng):
    """(name, f, inputs) triples; each f maps inputs to a scalar."""
    def proj(shape):
        return rng.normal(size=shape)

    cases = []

    def case(name, fn, inputs):
        probe = fn(*inputs)
        w = proj(probe.shape)
        cases.append((name, lambda *xs: _weighted(fn(*xs), w), inputs))

    case("add_broadcast", ad.add, [_t(rng, 3, 4), _t(rng, 4)])
    case("sub_broadcast", ad.sub, [_t(rng, 2, 3, 4), _t(rng, 3, 1)])
    case("mul_broadcast", ad.mul, [_t(rng, 3, 4), _t(rng, 1, 4)])
    case("scale", lambda x: ad.scale(x, -1.7), [_t(rng, 5)])
    case("relu", ad.relu, [_t(rng, 4, 5, lo=0.05)])
    case("gelu", ad.gelu, [_t(rng, 4, 5)])
    case("absolute", ad.absolute, [_t(rng, 4, 5, lo=0.05)])
    case("matmul_batched", ad.matmul, [_t(rng, 2, 3, 4, 5), _t(rng, 5, 2)])
    case("matmul_broadcast", ad.matmul, [_t(rng, 2, 1, 3, 4), _t(rng, 3, 4, 2)])
    case("linear", ad.linear, [_t(rng, 2, 3, 4), _t(rng, 5, 4), _t(rng, 5)])
    case("reshape", lambda x: ad.reshape(x, (6, 4)), [_t(rng, 2, 3, 4)])
    case("transpose", lambda x: ad.transpose(x, (2, 0, 1)), [_t(rng, 2, 3, 4)])
    case("swapaxes", lambda x: ad.swapaxes(x, 0, -1), [_t(rng, 2, 3, 4)])
    case("broadcast_to", lambda x: ad.broadcast_to(x, (3, 2, 4)), [_t(rng, 2, 1)])
    case("concat", lambda a, b: ad.concat([a, b], axis=-2), [_t(rng, 2, 3, 4), _t(rng, 2, 1, 4)])
    case("stack", lambda a, b: ad.stack([a, b], axis=1), [_t(rng, 3, 4), _t(rng, 3, 4)])
    case("index_basic", lambda x: x[1:, ::2], [_t(rng, 4, 5)])
    case("index_advanced", lambda x: ad.index(x, (np.array([0, 2, 0]), slice(None))), [_t(rng, 3, 4)])
    gidx = np.array([[2, 0, 2], [1, 1, 3]])
    case("gather_rows", lambda x: ad.gather_rows(x, gidx), [_t(rng, 2, 4, 3)])
    case("sum_axis", lambda x: ad.reduce(x, "sum", axis=1, keepdims=True), [_t(rng, 3, 4, 2)])
    case("mean_axis", lambda x: ad.reduce(x, "mean", axis=(0, 2)), [_t(rng, 3, 4, 2)])
    case("max_axis", lambda x: ad.reduce(x, "max", axis=-1),
         [Tensor(rng.permutation(24).reshape(2, 3, 4) * 0.1, dtype=np.float64)])
    case("softmax", lambda x: ad.softmax(x, axis=-1), [_t(rng, 3, 5)])
    case("layernorm", lambda x, g, b: ad.layernorm(x, g, b), [_t(rng, 3, 6), _t(rng, 6), _t(rng, 6)])
    case("l2_norm", lambda x: ad.l2_norm(x, axis=-1), [_t(rng, 4, 3)])
    case("l2_distance", ad.l2_distance, [_t(rng, 2, 3, 4), _t(rng, 2, 3, 4)])
    case("normalize", lambda x: ad.normalize(x, axis=-1), [_t(rng, 4, 3)])
    labels = np.array([0, 2, 1, 2])
    case("cross_entropy", lambda x: ad.cross_entropy(x, labels), [_t(rng, 4, 3)])
    mask = np.where(rng.random((1, 1, 3, 5)) < 0.3, ad.MASK_LOGIT, 0.0)
    mask[..., 0] = 0.0
    case("attention_masked", lambda q, k, v: attend(q, k, v, Tensor(mask)),
         [_t(rng, 2, 1, 3, 4), _t(rng, 2, 1, 5, 4), _t(rng, 2, 1, 5, 4)])
    for strategy in ("max", "avg", "attention"):
        xs = Tensor(rng.permutation(48).reshape(2, 3, 2, 4) * 0.1 + rng.normal(size=(2, 3, 2, 4)) * 0.01,
                    dtype=np.float64)
        if strategy == "attention":
            case("fusion_attention", lambda x, q: fuse(x, "attention", axis=1, query=q), [xs, _t(rng, 4)])
        else:
            case(f"fusion_{strategy}", lambda x, s=strategy: fuse(x, s, axis=1), [xs])
    o = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 4)), dtype=np.float64)
    cases.append(("sparsity_loss", lambda x: sparsity_loss(x), [o]))
    cases.append(("consistency_loss", lambda x: consistency_loss(x),
                  [Tensor(rng.uniform(0.05, 0.95, size=(3, 4, 5)), dtype=np.float64)]))
    return cases


def _randomize(module, rng, scale=0.3):
    """Replace every parameter with a generic draw so no path is identically zero."""
    for _, p in module.named_parameters():
        p.data = rng.normal(scale=scale, size=p.data.shape)


# The composite loss is O(10) on standardised pixels; at h=1e-5 f64 rounding
# in f(x +- h) swamps coordinates whose gradient sits near the absolute floor.
FULL_LOSS_STEP = 1e-4


def full_loss_case(conditioner="fine", n_captions=2, seed=0, fusion="max"):
    """The composite loss on a 2x2-patch model with fixed masks, as (f, params)."""
    rng = np.random.default_rng(seed)
    with ad.default_dtype(np.float64):
        enc_cfg = EncoderConfig(image_size=8, patch_size=4, channels=3, embed_dim=8, depth=1, heads=2)
        pair = EncoderPair(enc_cfg, rng)
        pcfg = PredictorConfig(pred_dim=8, depth=2, heads=2, conditioner=conditioner, fusion=fusion,
                               text_dim=8, mlp_ratio=2)
        pred = Predictor(pcfg, enc_cfg.embed_dim, enc_cfg.grid, rng, rng)
    images = rng.uniform(size=(2, 8, 8, 3))
    s_len = 5
    valid = np.ones((2, n_captions, s_len), dtype=bool)
    valid[:, :, 3:] = False                            # two pad positions per caption
    valid[0, -1, 1:] = False                           # and one single-word caption
    words = rng.normal(size=(2, n_captions, s_len, 8)) * valid[..., None]
    captions = CaptionBatch(np.where(valid, 2, PAD), words, valid)
    _randomize(pair.online, rng)
    _randomize(pair.target, rng)
    _randomize(pred, rng)
    context = np.array([[0, 1], [1, 2]])
    targets = np.array([[[2], [3]], [[3], [0]]])       # 2 blocks x 2 images x 1 patch
    cfg = LossConfig(lam=0.1, beta=0.5)
    params = [p for _, p in pair.online.named_parameters()] + [p for _, p in pred.named_parameters()]

    def f(*_):
        z_x = encode_context(pair, images, context).features
        z_y = encode_target(pair, images, targets).features
        out, sim = pred(z_x, context, targets, captions if conditioner != "none" else None)
        lp = predict_loss(out, z_y)
        if sim is None:
            return total_loss(lp, (), (), cfg).total
        sp, co = similarity_losses(sim)
        return total_loss(lp, (sp,), (co,), cfg).total

    return f, params


def run_gradcheck(seed=0, tol=1e-4, conditioners=("fine",), max_coords=4, log=None):
    """Run every op check and the full-loss checks; returns a list of CheckResult."""
    rng = np.random.default_rng(seed)
    results = []
    with ad.default_dtype(np.float64):
        for name, f, inputs in op_cases(rng):
            t0 = time.perf_counter()
            rep = grad_check(f, inputs, tol=tol)
            results.append(CheckResult(name, rep.ok, rep.max_rel_err, time.perf_counter() - t0))
            if log:
                log(results[-1])
        for kind in conditioners:
            if kind not in CONDITIONERS:
                raise ValueError(f"unknown conditioner {kind!r}")
            t0 = time.perf_counter()
            f, params = full_loss_case(kind, seed=seed)
            rep = grad_check(f, params, h=FULL_LOSS_STEP, tol=tol, max_coords=max_coords,
                             rng=np.random.default_rng(seed))
            results.append(CheckResult(f"full_loss[{kind}]", rep.ok, rep.max_rel_err,
                                       time.perf_counter() - t0))
            if log:
                log(results[-1])
    return results


def format_report(results):
    lines = [f"{'check':<28} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<28} {r.max_rel_err:12.3e}  {'ok' if r.ok else 'FAIL'}")
    n_bad = sum(not r.ok for r in results)
    lines.append(f"{len(results) - n_bad}/{len(results)} checks passed")
    return "\n".join(lines)
