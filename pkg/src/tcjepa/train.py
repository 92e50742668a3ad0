"""Training: schedules, AdamW, the joint step, checkpoints and metrics."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DataConfig, SyntheticDataset
from .losses import LossConfig, predict_loss, similarity_losses, total_loss
from .masking import MaskingConfig, sample_masks
from .predictor import Predictor, PredictorConfig
from .vit import EncoderConfig, EncoderPair, ema_update, encode_context, encode_target

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "l_predict", "l_sparse", "l_consistency", "total", "lr", "wd", "ema_m")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss: {diagnostics}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 64
    epochs: int = 50
    warmup_epochs: int = 5
    max_steps: int | None = None
    base_lr: float = 1e-3
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_start: float = 0.996
    ema_end: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    target_norm: bool = False
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0   # epochs; 0 = only at the end

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.predictor.text_dim != self.data.text_dim:
            raise ValueError("predictor.text_dim must equal data.text_dim")
        if self.data.image_size != self.encoder.image_size:
            raise ValueError("data.image_size must equal encoder.image_size")

    @property
    def steps_per_epoch(self):
        return max(self.data.size // self.batch_size, 1)

    @property
    def total_steps(self):
        full = self.epochs * self.steps_per_epoch
        return full if self.max_steps is None else min(full, self.max_steps)

    @property
    def warmup_steps(self):
        frac = self.warmup_epochs / self.epochs if self.epochs else 0.0
        return int(round(frac * self.total_steps))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {"encoder": EncoderConfig, "predictor": PredictorConfig, "masking": MaskingConfig,
               "loss": LossConfig, "data": DataConfig}
        kwargs = {}
        for k, v in d.items():
            if k in sub:
                kwargs[k] = sub[k](**v) if isinstance(v, dict) else v
            else:
                kwargs[k] = v
        return cls(**kwargs)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# schedules and optimiser
# ---------------------------------------------------------------------------

def schedules(step, total_steps, cfg: TrainConfig, warmup_steps=None):
    """(lr, weight decay, EMA momentum) at ``step``.

    lr rises linearly from 0 to base_lr over the warmup and then follows a
    half cosine to 0 at ``total_steps``; weight decay and momentum move
    linearly between their endpoints.
    """
    warmup = cfg.warmup_steps if warmup_steps is None else warmup_steps
    total = max(total_steps, 1)
    step = min(max(step, 0), total)
    if warmup > 0 and step < warmup:
        lr = cfg.base_lr * step / warmup
    else:
        span = max(total - warmup, 1)
        lr = 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (step - warmup) / span))
    frac = step / total
    wd = cfg.wd_start + (cfg.wd_end - cfg.wd_start) * frac
    m = cfg.ema_start + (cfg.ema_end - cfg.ema_start) * frac
    return lr, wd, m


def adamw_update(params, grads, moments, step, lr, wd, beta1=0.9, beta2=0.95, eps=1e-8):
    """Decoupled AdamW, in place.

    ``params``/``grads``/``moments`` are dicts keyed by name; moments hold
    (m, v) pairs.  ``step`` is the 1-based update count for bias correction.
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    """
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = moments[name]
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data = p.data - dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(eps)) + dt(wd) * p.data)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

class TrainState:
    """Everything a training run owns: models, optimiser moments, step, RNG."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        with ad.default_dtype(np.dtype(cfg.dtype)):
            root = np.random.SeedSequence([cfg.seed, 0x1E9A])
            enc_ss, pred_ss, cond_ss, mask_ss = root.spawn(4)
            self.pair = EncoderPair(cfg.encoder, np.random.default_rng(enc_ss), cfg.ema_start)
            self.predictor = Predictor(cfg.predictor, cfg.encoder.embed_dim, cfg.encoder.grid,
                                       np.random.default_rng(pred_ss), np.random.default_rng(cond_ss))
        self.rng = np.random.default_rng(mask_ss)
        self.step = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in self.trainable().items()}

    def trainable(self):
        out = {f"online.{k}": p for k, p in self.pair.online.named_parameters()}
        out.update({f"predictor.{k}": p for k, p in self.predictor.named_parameters()})
        return out

    def tensors(self):
        """All persistent arrays by checkpoint name."""
        out = {k: p.data for k, p in self.trainable().items()}
        out.update({f"target.{k}": p.data for k, p in self.pair.target.named_parameters()})
        for k, (m, v) in self.moments.items():
            out[f"opt.m.{k}"] = m
            out[f"opt.v.{k}"] = v
        return out

    def meta(self):
        return {"step": self.step, "config": self.cfg.to_dict(),
                "rng": self.rng.bit_generator.state}


def compute_losses(state: TrainState, images, captions):
    """Forward pass of one minibatch; returns (LossBreakdown, predictions, similarity)."""
    cfg = state.cfg
    masks = sample_masks(cfg.masking, cfg.encoder.grid, images.shape[0], state.rng)
    z_x = encode_context(state.pair, images, masks.context).features
    z_y = encode_target(state.pair, images, masks.targets, normalize=cfg.target_norm).features
    conditioned = cfg.predictor.conditioner != "none"
    pred, sim = state.predictor(z_x, masks.context, masks.targets, captions if conditioned else None)
    l_pred = predict_loss(pred, z_y, cfg.loss.unique_patches, masks.targets)
    sparse = consistency = ()
    if sim is not None:
        sp, co = similarity_losses(sim, cfg.loss.unique_patches)
        sparse, consistency = (sp,), (co,)
    return total_loss(l_pred, sparse, consistency, cfg.loss), masks, pred, sim


def train_step(state: TrainState, batch):
    """One joint update: loss, backward, AdamW on encoder+predictor, EMA on the target."""
    cfg = state.cfg
    images, captions = batch[0], batch[1]
    lr, wd, m_ema = schedules(state.step, cfg.total_steps, cfg)
    try:
        breakdown, *_ = compute_losses(state, images, captions)
    except FloatingPointError as e:
        # a NaN caught mid-forward (softmax guard or debug mode): no term values exist yet
        nan = float("nan")
        raise NonFiniteLossError({"step": state.step, "l_predict": nan, "l_sparse": nan,
                                  "l_consistency": nan, "total": nan, "where": str(e)}) from e
    total = float(breakdown.total.data)
    if not math.isfinite(total):
        raise NonFiniteLossError({"step": state.step, **breakdown.as_row()})
    params = state.trainable()
    for p in params.values():
        p.grad = None
    breakdown.total.backward()
    grads = {k: p.grad for k, p in params.items()}
    adamw_update(params, grads, state.moments, state.step + 1, lr, wd,
                 cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for p in params.values():
        p.grad = None
    ema_update(state.pair, m_ema)
    state.step += 1
    return state, breakdown, (lr, wd, m_ema)


class Trainer:
    """Runs steps over a SyntheticDataset in a seed-determined order."""

    def __init__(self, cfg: TrainConfig, state: TrainState | None = None, dataset=None):
        self.cfg = cfg
        self.state = state or TrainState(cfg)
        self.dataset = dataset or SyntheticDataset(cfg.data)
        self._order_epoch = None
        self._order = None

    def batch_indices(self, step):
        spe = self.cfg.steps_per_epoch
        epoch, pos = divmod(step, spe)
        if self._order_epoch != epoch:
            self._order = self.dataset.epoch_order(epoch, self.cfg.seed)
            self._order_epoch = epoch
        b = self.cfg.batch_size
        return self._order[pos * b:(pos + 1) * b]

    def step(self):
        idx = self.batch_indices(self.state.step)
        images, captions, _ = self.dataset.batch(idx, np.dtype(self.cfg.dtype).type)
        step = self.state.step
        _, breakdown, (lr, wd, m) = train_step(self.state, (images, captions))
        row = {"step": step, **breakdown.as_row(), "lr": lr, "wd": wd, "ema_m": m}
        return row

    def run(self, steps=None, metrics_path=None, checkpoint_dir=None, callback=None):
        total = self.cfg.total_steps if steps is None else min(self.state.step + steps, self.cfg.total_steps)
        writer = MetricsWriter(metrics_path) if metrics_path else None
        rows = []
        ckpt_every = self.cfg.checkpoint_every * self.cfg.steps_per_epoch
        try:
            while self.state.step < total:
                row = self.step()
                rows.append(row)
                if writer:
                    writer.write(row)
                if callback:
                    callback(row)
                if checkpoint_dir and ckpt_every and self.state.step % ckpt_every == 0:
                    save_checkpoint(self.state, Path(checkpoint_dir) / f"step_{self.state.step:07d}.tcjp")
        finally:
            if writer:
                writer.close()
        if checkpoint_dir:
            save_checkpoint(self.state, Path(checkpoint_dir) / "final.tcjp")
        return rows


class MetricsWriter:
    """Append-only CSV with a fixed column order."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(METRIC_FIELDS)

    def write(self, row):
        self._w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
        self._fh.flush()

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#   "TCJP" | u32 version | u32 count
#   count x (u32 name_len, name utf-8, u8 dtype, u8 rank, u32 dims[rank], u64 offset)
#   payloads (little endian, at the stated absolute offsets)
#   u32 CRC32 of every preceding byte

MAGIC = b"TCJP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2, np.dtype("int64"): 3}
META_KEY = "__meta__"


def encode_checkpoint(tensors, meta):
    items = dict(sorted(tensors.items()))
    items[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    entries = []
    dir_size = 12
    for name, arr in items.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        dir_size += 4 + len(nb) + 2 + 4 * arr.ndim + 8
        entries.append((nb, arr))
    body = bytearray()
    directory = bytearray(MAGIC + struct.pack("<II", VERSION, len(entries)))
    offset = dir_size
    for nb, arr in entries:
        directory += struct.pack("<I", len(nb)) + nb
        directory += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", offset)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
        body += payload
        offset += len(payload)
    blob = bytes(directory) + bytes(body)
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def decode_checkpoint(blob):
    """Parse bytes into (tensors, meta); every structural problem raises CheckpointError."""
    if len(blob) < 16:
        raise CheckpointError("file too short")
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch (corrupt or truncated file)")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    end = len(blob) - 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if offset + nbytes > end:
                raise CheckpointError(f"payload of {name} runs past the end")
            tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=offset).reshape(dims).copy()
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed directory: {e}") from None
    if META_KEY not in tensors:
        raise CheckpointError("missing metadata")
    meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
    return tensors, meta


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(state.tensors(), state.meta())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Rebuild a TrainState; nothing is constructed unless the whole file parses."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    tensors, meta = decode_checkpoint(blob)
    cfg = TrainConfig.from_dict(meta["config"])
    state = TrainState(cfg)
    expected = state.tensors()
    missing = set(expected) - set(tensors)
    extra = set(tensors) - set(expected)
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} vs {expected[name].shape}")
    params = state.trainable()
    for k, p in params.items():
        p.data = tensors[k].astype(p.dtype)
    for k, p in state.pair.target.named_parameters():
        p.data = tensors[f"target.{k}"].astype(p.dtype)
    for k in state.moments:
        state.moments[k] = (tensors[f"opt.m.{k}"].copy(), tensors[f"opt.v.{k}"].copy())
    state.step = int(meta["step"])
    state.rng.bit_generator.state = meta["rng"]
    return state
