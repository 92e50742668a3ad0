"""Multi-block masking: one context rectangle and several target rectangles.

Block sizes come from a (scale, aspect) draw turned into integer sides by
``h = round(sqrt(area * aspect))``, ``w = round(sqrt(area / aspect))``,
clamped to the grid.  A size is admissible when its cell count lies in
``[floor(s_min * G), floor(s_max * G)]`` and ``h / w`` lies inside the aspect
range; inadmissible draws are redrawn.  As in the I-JEPA collator, one target
size and one context size are drawn per batch and shared by its items, so the
per-block predictor forwards of a batch stack into one array.  Contexts are
then subsampled to the smallest context in the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MaskSamplingError(RuntimeError):
    """Retry budget exhausted: the masking configuration is infeasible."""


@dataclass
class MaskingConfig:
    num_targets: int = 4
    target_scale: tuple = (0.15, 0.2)
    target_aspect: tuple = (0.75, 1.5)
    context_scale: tuple = (0.85, 1.0)
    context_aspect: tuple = (1.0, 1.0)
    min_keep: int = 1
    max_tries: int = 100

    def __post_init__(self):
        self.target_scale = tuple(float(v) for v in self.target_scale)
        self.target_aspect = tuple(float(v) for v in self.target_aspect)
        self.context_scale = tuple(float(v) for v in self.context_scale)
        self.context_aspect = tuple(float(v) for v in self.context_aspect)
        for name in ("target_scale", "context_scale"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"{name} {(lo, hi)} must satisfy 0 < lo <= hi <= 1")
        for name in ("target_aspect", "context_aspect"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValueError(f"{name} {(lo, hi)} must satisfy 0 < lo <= hi")
        if self.num_targets < 0:
            raise ValueError("num_targets must be >= 0")


@dataclass
class MaskSpec:
    grid_shape: tuple
    context: np.ndarray                       # sorted patch ids, B_x
    targets: list = field(default_factory=list)  # sorted patch ids per block

    @property
    def target_union(self):
        if not self.targets:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self.targets))


@dataclass
class MaskBatch:
    """Stacked masks for a minibatch: context (B, Nc), targets (blocks, B, Nt)."""

    specs: list
    context: np.ndarray
    targets: np.ndarray


def admissible_sizes(scale, aspect, grid_shape):
    """All (h, w) rectangles a draw from ``scale`` x ``aspect`` may produce."""
    gh, gw = grid_shape
    total = gh * gw
    lo, hi = math.floor(scale[0] * total), math.floor(scale[1] * total)
    out = []
    for h in range(1, gh + 1):
        for w in range(1, gw + 1):
            if lo <= h * w <= hi and _aspect_ok(h, w, aspect):
                out.append((h, w))
    return out


def _aspect_ok(h, w, aspect):
    r = h / w
    return aspect[0] - 1e-9 <= r <= aspect[1] + 1e-9


def _sample_size(rng, scale, aspect, grid_shape, max_tries):
    gh, gw = grid_shape
    total = gh * gw
    lo, hi = math.floor(scale[0] * total), math.floor(scale[1] * total)
    for _ in range(max_tries):
        s = rng.uniform(scale[0], scale[1])
        a = rng.uniform(aspect[0], aspect[1])
        area = s * total
        h = min(max(int(round(math.sqrt(area * a))), 1), gh)
        w = min(max(int(round(math.sqrt(area / a))), 1), gw)
        if lo <= h * w <= hi and _aspect_ok(h, w, aspect):
            return h, w
    raise MaskSamplingError(
        f"no admissible block for scale={scale} aspect={aspect} on grid {grid_shape} "
        f"after {max_tries} draws")


def _rect(rng, size, grid_shape):
    h, w = size
    gh, gw = grid_shape
    top = int(rng.integers(0, gh - h + 1))
    left = int(rng.integers(0, gw - w + 1))
    rows = np.arange(top, top + h)
    cols = np.arange(left, left + w)
    return (rows[:, None] * gw + cols[None, :]).reshape(-1)


def sample_masks(cfg: MaskingConfig, grid_shape, batch_size, rng) -> MaskBatch:
    """Draw masks for ``batch_size`` images sharing block sizes."""
    grid_shape = tuple(grid_shape)
    tsize = (_sample_size(rng, cfg.target_scale, cfg.target_aspect, grid_shape, cfg.max_tries)
             if cfg.num_targets else (0, 0))
    csize = _sample_size(rng, cfg.context_scale, cfg.context_aspect, grid_shape, cfg.max_tries)
    specs = []
    for _ in range(batch_size):
        for _attempt in range(cfg.max_tries):
            targets = [np.sort(_rect(rng, tsize, grid_shape)) for _ in range(cfg.num_targets)]
            ctx = _rect(rng, csize, grid_shape)
            if targets:
                ctx = np.setdiff1d(ctx, np.concatenate(targets))
            if len(ctx) >= cfg.min_keep and len(ctx) > 0:
                break
        else:
            raise MaskSamplingError(
                f"context emptied by targets in {cfg.max_tries} attempts "
                f"(context {csize}, targets {tsize} on {grid_shape})")
        specs.append(MaskSpec(grid_shape, np.sort(ctx).astype(np.int64), targets))

    keep = min(len(s.context) for s in specs)
    for s in specs:
        if len(s.context) > keep:
            s.context = np.sort(rng.choice(s.context, size=keep, replace=False))
    context = np.stack([s.context for s in specs]).astype(np.int64)
    if cfg.num_targets:
        targets = np.stack([np.stack([s.targets[k] for s in specs]) for k in range(cfg.num_targets)])
    else:
        targets = np.zeros((0, batch_size, 0), dtype=np.int64)
    return MaskBatch(specs, context, targets.astype(np.int64))


def sample_mask(cfg: MaskingConfig, grid_shape, rng) -> MaskSpec:
    return sample_masks(cfg, grid_shape, 1, rng).specs[0]


def _is_rectangle(idx, grid_shape):
    gh, gw = grid_shape
    rows, cols = np.divmod(np.asarray(idx), gw)
    h = rows.max() - rows.min() + 1
    w = cols.max() - cols.min() + 1
    return len(np.unique(idx)) == len(idx) == h * w, (int(h), int(w))


def validate_mask(spec: MaskSpec, cfg: MaskingConfig | None = None, expected_targets=None):
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    gh, gw = spec.grid_shape
    total = gh * gw
    ctx = np.asarray(spec.context)
    if ctx.size == 0:
        problems.append("context is empty")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= total):
        problems.append("context index outside grid")
    if ctx.size and np.any(np.diff(ctx) <= 0):
        problems.append("context not strictly sorted")
    n_expected = expected_targets if expected_targets is not None else (cfg.num_targets if cfg else None)
    if n_expected is not None and len(spec.targets) != n_expected:
        problems.append(f"expected {n_expected} target blocks, got {len(spec.targets)}")
    for k, blk in enumerate(spec.targets):
        blk = np.asarray(blk)
        if blk.size == 0:
            problems.append(f"target block {k} is empty")
            continue
        if blk.min() < 0 or blk.max() >= total:
            problems.append(f"target block {k} index outside grid")
            continue
        if np.any(np.diff(blk) <= 0):
            problems.append(f"target block {k} not strictly sorted")
        rect, (h, w) = _is_rectangle(blk, spec.grid_shape)
        if not rect:
            problems.append(f"target block {k} is not a solid rectangle")
        elif cfg is not None:
            lo = math.floor(cfg.target_scale[0] * total)
            hi = math.floor(cfg.target_scale[1] * total)
            if not lo <= h * w <= hi:
                problems.append(f"target block {k} area {h * w} outside [{lo}, {hi}]")
            if not _aspect_ok(h, w, cfg.target_aspect):
                problems.append(f"target block {k} aspect {h}/{w} outside {cfg.target_aspect}")
        if np.intersect1d(blk, ctx).size:
            problems.append(f"context overlaps target block {k}")
    return problems
