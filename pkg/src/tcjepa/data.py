"""Synthetic glyph scenes with multi-caption token sequences.

A scene is a grid of cells (4x4 by default); some cells hold a coloured glyph.
Captions list ``color glyph cell SEP`` triples, so any caption that mentions a
placement pins down the pixels of its cell exactly.  Images render each glyph
with a small offset inside its cell; the offset is a fixed function of
(glyph, color, cell), so it is still determined by the caption.

Every scene has a *subject*: its glyph is placed in two cells while all other
placements use distinct glyphs.  The subject glyph is the probe label.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError
from .predictor import CaptionBatch

PAD, SEP = 0, 1

COLORS = np.array([
    [0.95, 0.25, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
], dtype=np.float64)

BACKGROUND = 0.1

_GLYPH_ART = [
    ["#####", "#...#", "#...#", "#...#", "#####"],   # box
    ["..#..", "..#..", "#####", "..#..", "..#.."],   # plus
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],   # cross
    ["..#..", ".###.", "#####", ".###.", "..#.."],   # diamond
    ["#....", "##...", "###..", "####.", "#####"],   # wedge
    ["#####", "....#", "....#", "....#", "....#"],   # hook
    ["#.#.#", ".#.#.", "#.#.#", ".#.#.", "#.#.#"],   # checker
    ["#####", ".....", "#####", ".....", "#####"],   # bars
]


def glyph_bitmaps():
    return np.array([[[c == "#" for c in row] for row in art] for art in _GLYPH_ART], dtype=np.float64)


@dataclass
class Vocabulary:
    """Token ids and a frozen Gaussian embedding table E of shape (d_t, V)."""

    num_colors: int = 4
    num_glyphs: int = 8
    num_cells: int = 16
    size: int = 64
    dim: int = 32
    seed: int = 0
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        needed = 2 + self.num_colors + self.num_glyphs + self.num_cells
        if needed > self.size:
            raise ValueError(f"vocabulary of size {self.size} cannot hold {needed} tokens")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x7E47]))
        table = rng.normal(0.0, 1.0, size=(self.dim, self.size))
        table[:, PAD] = 0.0
        self.table = table

    def color(self, c):
        return 2 + c

    def glyph(self, g):
        return 2 + self.num_colors + g

    def cell(self, k):
        return 2 + self.num_colors + self.num_glyphs + k

    def embed(self, token_ids, dtype=None):
        """Row s of the result is column ``token_ids[s]`` of the table; pads are zero."""
        ids = np.asarray(token_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise DomainError(f"token id outside vocabulary of size {self.size}")
        out = np.moveaxis(self.table[:, ids], 0, -1)
        return out.astype(dtype or ad.get_default_dtype())


@dataclass(frozen=True)
class Placement:
    glyph: int
    color: int
    cell: int


@dataclass
class SceneSpec:
    cells: tuple
    placements: list
    subject: int
    seed: int


@dataclass
class DataConfig:
    image_size: int = 32
    cells: int = 4
    num_glyphs: int = 8
    num_colors: int = 4
    min_placements: int = 3
    max_placements: int = 5
    caption_length: int = 24
    num_captions: int = 4
    vocab_size: int = 64
    text_dim: int = 32
    vocab_seed: int = 0
    size: int = 2048
    seed: int = 0


def gen_scene(seed, cfg: DataConfig | None = None) -> SceneSpec:
    cfg = cfg or DataConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C3E]))
    n_cells = cfg.cells * cfg.cells
    hi = min(cfg.max_placements, n_cells, cfg.num_glyphs + 1)
    count = int(rng.integers(max(cfg.min_placements, 2), hi + 1))
    cells = rng.choice(n_cells, size=count, replace=False)
    subject = int(rng.integers(cfg.num_glyphs))
    others = rng.permutation([g for g in range(cfg.num_glyphs) if g != subject])[: count - 2]
    glyphs = [subject, subject] + [int(g) for g in others]
    colors = rng.integers(cfg.num_colors, size=count)
    placements = [Placement(int(g), int(c), int(k)) for g, c, k in zip(glyphs, colors, cells)]
    placements.sort(key=lambda p: p.cell)
    return SceneSpec((cfg.cells, cfg.cells), placements, subject, seed)


def _offset(p: Placement, slack):
    h = zlib.crc32(f"{p.glyph}/{p.color}/{p.cell}".encode())
    return h % (slack + 1), (h // 7) % (slack + 1)


def render(scene: SceneSpec, height=32, width=32):
    """Image in [0, 1] of shape (H, W, 3); empty cells are flat background."""
    gh, gw = scene.cells
    if height % gh or width % gw:
        raise DomainError(f"image {height}x{width} not divisible by the {gh}x{gw} cell grid")
    ch, cw = height // gh, width // gw
    img = np.full((height, width, 3), BACKGROUND, dtype=np.float64)
    bitmaps = glyph_bitmaps()
    gs = bitmaps.shape[1]
    if gs > ch or gs > cw:
        raise DomainError("cells too small for the glyph bitmaps")
    slack = min(ch, cw) - gs
    for p in scene.placements:
        r, c = divmod(p.cell, gw)
        dy, dx = _offset(p, slack)
        y0, x0 = r * ch + dy, c * cw + dx
        mask = bitmaps[p.glyph][:, :, None]
        patch = img[y0:y0 + gs, x0:x0 + gs]
        img[y0:y0 + gs, x0:x0 + gs] = patch * (1 - mask) + COLORS[p.color] * mask
    return img


def gen_captions(scene: SceneSpec, n, vocab: Vocabulary, length=24, seed=0):
    """``n`` token sequences (n, length) jointly mentioning every placement.

    Each caption covers a random non-empty subset; placements nobody picked
    are then appended to the shortest captions that have room.
    """
    if n < 1:
        raise DomainError("need at least one caption")
    per_caption = length // 4
    k = len(scene.placements)
    if k > n * per_caption:
        raise DomainError(f"{k} placements cannot fit in {n} captions of {length} tokens")
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, seed, 0xCA9]))
    chosen = []
    for _ in range(n):
        size = int(rng.integers(1, min(k, per_caption) + 1))
        chosen.append(sorted(rng.choice(k, size=size, replace=False).tolist()))
    covered = set().union(*map(set, chosen))
    for j in range(k):
        if j in covered:
            continue
        order = sorted(range(n), key=lambda i: (len(chosen[i]), i))
        for i in order:
            if len(chosen[i]) < per_caption:
                chosen[i] = sorted(chosen[i] + [j])
                break
    tokens = np.full((n, length), PAD, dtype=np.int64)
    for i, sel in enumerate(chosen):
        order = rng.permutation(sel)
        seq = []
        for j in order:
            p = scene.placements[j]
            seq += [vocab.color(p.color), vocab.glyph(p.glyph), vocab.cell(p.cell), SEP]
        tokens[i, :len(seq)] = seq
    return tokens


def mentioned_placements(tokens, vocab: Vocabulary):
    """Decode (glyph, color, cell) triples from caption tokens."""
    out = set()
    for row in np.atleast_2d(tokens):
        for s in range(0, len(row) - 3, 4):
            if row[s] == PAD:
                break
            color = row[s] - 2
            glyph = row[s + 1] - 2 - vocab.num_colors
            cell = row[s + 2] - 2 - vocab.num_colors - vocab.num_glyphs
            out.add(Placement(int(glyph), int(color), int(cell)))
    return out


def embed(tokens, vocab: Vocabulary, dtype=None) -> CaptionBatch:
    """Token ids (..., N, S) -> CaptionBatch with pad mask."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        tokens = tokens[None]
    return CaptionBatch(tokens, vocab.embed(tokens, dtype), tokens != PAD)


class SyntheticDataset:
    """Fixed collection of rendered scenes with captions, indexed 0..size-1."""

    def __init__(self, cfg: DataConfig | None = None):
        self.cfg = cfg or DataConfig()
        c = self.cfg
        self.vocab = Vocabulary(num_colors=c.num_colors, num_glyphs=c.num_glyphs,
                                num_cells=c.cells * c.cells, size=c.vocab_size,
                                dim=c.text_dim, seed=c.vocab_seed)
        seeds = np.random.SeedSequence([c.seed, 0xDA7A]).generate_state(c.size, dtype=np.uint32)
        self.seeds = seeds.astype(np.int64)
        self.scenes = [gen_scene(int(s), c) for s in self.seeds]
        self.images = np.stack([render(sc, c.image_size, c.image_size) for sc in self.scenes])
        self.tokens = np.stack([gen_captions(sc, c.num_captions, self.vocab, c.caption_length, 0)
                                for sc in self.scenes])
        self.labels = np.array([sc.subject for sc in self.scenes], dtype=np.int64)

    def __len__(self):
        return len(self.scenes)

    @property
    def num_classes(self):
        return self.cfg.num_glyphs

    def batch(self, idx, dtype=None):
        idx = np.asarray(idx)
        dtype = dtype or ad.get_default_dtype()
        return (self.images[idx].astype(dtype), embed(self.tokens[idx], self.vocab, dtype),
                self.labels[idx])

    def epoch_order(self, epoch, seed):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xE90C]))
        return rng.permutation(len(self))

    # -- export / import ---------------------------------------------------
    def export(self, directory):
        """Write little-endian f32 image blobs and a JSON manifest."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            (d / f"image_{i:06d}.f32").write_bytes(img.astype("<f4").tobytes())
        manifest = {
            "format": "tcjepa-synthetic-v1",
            "config": self.cfg.__dict__,
            "image_shape": list(self.images.shape[1:]),
            "items": [{"file": f"image_{i:06d}.f32", "seed": int(self.seeds[i]),
                       "label": int(self.labels[i]), "tokens": self.tokens[i].tolist()}
                      for i in range(len(self))],
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @staticmethod
    def load_exported(directory):
        """Return (images f32, tokens, labels, manifest) from an exported directory."""
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        shape = tuple(manifest["image_shape"])
        images = np.stack([np.frombuffer((d / it["file"]).read_bytes(), dtype="<f4").reshape(shape)
                           for it in manifest["items"]])
        tokens = np.array([it["tokens"] for it in manifest["items"]], dtype=np.int64)
        labels = np.array([it["label"] for it in manifest["items"]], dtype=np.int64)
        return images, tokens, labels, manifest
