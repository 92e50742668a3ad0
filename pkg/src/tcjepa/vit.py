"""Patch embedding, fixed 2-D sin-cos positions, ViT encoder and its EMA twin."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, DomainError, Tensor
from .nn import Block, Linear, Module


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    # fixed per-channel input standardisation; the defaults are the pixel
    # statistics of the synthetic glyph scenes (mostly flat background)
    pixel_mean: tuple = (0.124, 0.122, 0.115)
    pixel_std: tuple = (0.132, 0.115, 0.096)

    def __post_init__(self):
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)
        if len(self.pixel_mean) != self.channels or len(self.pixel_std) != self.channels:
            raise ConfigError(f"pixel_mean and pixel_std need one entry per channel ({self.channels})")
        if min(self.pixel_std) <= 0:
            raise ConfigError("pixel_std entries must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 for 2-D sin-cos positions")

    @property
    def grid(self):
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self):
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


def patchify(images, patch_size):
    """(..., H, W, C) -> (..., num_patches, p*p*C) in row-major patch order."""
    images = np.asarray(images)
    *lead, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches, patch_size, grid_shape, channels):
    patches = np.asarray(patches)
    *lead, n, _ = patches.shape
    gh, gw = grid_shape
    p = patch_size
    if n != gh * gw:
        raise DimensionError(f"{n} patches do not fill a {gh}x{gw} grid")
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, gh * p, gw * p, channels)


def _sincos_1d(d, pos):
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid_shape, d):
    """Fixed 2-D positions: first half of the channels encodes the row, second the column."""
    if d % 4:
        raise ConfigError(f"sin-cos position dim {d} must be divisible by 4")
    gh, gw = grid_shape
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(d // 2, rows), _sincos_1d(d // 2, cols)], axis=1)
    return emb.astype(ad.get_default_dtype())


@dataclass
class PatchFeatures:
    features: Tensor          # (..., K, d)
    indices: np.ndarray       # (..., K) patch ids
    grid_shape: tuple


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.embed_dim, rng)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.pos = sincos_pos_embed(cfg.grid, cfg.embed_dim)

    def standardize(self, patches):
        """Per-channel ``(x - mean) / std`` on flattened (..., p*p*C) patches."""
        c = self.cfg.channels
        dt = patches.dtype
        mean = np.asarray(self.cfg.pixel_mean, dtype=dt)
        std = np.asarray(self.cfg.pixel_std, dtype=dt)
        shaped = patches.reshape(*patches.shape[:-1], -1, c)
        return ((shaped - mean) / std).reshape(patches.shape)

    def __call__(self, patches, idx=None):
        """Encode ``patches`` (B, P, patch_dim); with ``idx`` (B, K) only those tokens enter."""
        patches = self.standardize(np.asarray(patches, dtype=self.pos.dtype))
        pos = self.pos
        if idx is not None:
            idx = np.asarray(idx)
            patches = np.take_along_axis(patches, idx[..., None], axis=-2)
            pos = self.pos[idx]
        x = ad.add(self.patch_embed(Tensor(patches)), Tensor(pos))
        for blk in self.blocks:
            x = blk(x)
        return x


class EncoderPair:
    """Online encoder f_theta and its exponential-moving-average copy."""

    def __init__(self, cfg: EncoderConfig, rng, ema_momentum=0.996):
        self.cfg = cfg
        self.online = Encoder(cfg, rng)
        self.target = copy.deepcopy(self.online)
        self.target.set_requires_grad(False)
        self.ema_momentum = ema_momentum


def layer_norm_features(x):
    """Parameter-free LayerNorm over the feature axis (numpy)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def encode_context(pair: EncoderPair, images, context_idx):
    """Online features for the context patches only; other tokens never enter."""
    context_idx = np.asarray(context_idx)
    if context_idx.shape[-1] == 0:
        raise DomainError("empty context set")
    patches = patchify(images, pair.cfg.patch_size)
    feats = pair.online(patches, context_idx)
    return PatchFeatures(feats, context_idx, pair.cfg.grid)


def encode_target(pair: EncoderPair, images, target_idx, normalize=False):
    """Target-encoder features of the full image, rows picked per target block.

    ``target_idx`` is (blocks, B, K).  The result carries no gradient edges.
    """
    target_idx = np.asarray(target_idx)
    if target_idx.size == 0 or target_idx.shape[-1] == 0:
        raise DomainError("empty target set")
    patches = patchify(images, pair.cfg.patch_size)
    with ad.no_grad():
        full = pair.target(patches).data
    if normalize:
        full = layer_norm_features(full)
    rows = np.take_along_axis(full[None], target_idx[..., None], axis=-2)
    return PatchFeatures(Tensor(rows), target_idx, pair.cfg.grid)


def ema_update(pair: EncoderPair, momentum=None):
    """theta_bar <- m * theta_bar + (1 - m) * theta, elementwise."""
    m = pair.ema_momentum if momentum is None else momentum
    if not 0.0 <= m <= 1.0:
        raise DomainError(f"EMA momentum {m} outside [0, 1]")
    online = dict(pair.online.named_parameters())
    for name, tp in pair.target.named_parameters():
        op = online[name]
        dt = tp.dtype.type
        tp.data = dt(m) * tp.data + dt(1.0 - m) * op.data
    return pair
