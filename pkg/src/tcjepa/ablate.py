"""Ablation sweeps: one short training run plus a linear probe per grid point."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import DataConfig, SyntheticDataset
from .masking import MaskSamplingError
from .predictor import CONDITIONERS, FUSIONS
from .probe import ProbeConfig, linear_probe
from .train import NonFiniteLossError, TrainConfig, Trainer

KINDS = ("masking_scale", "loss_coeff", "n_captions", "fusion", "conditioner")

DEFAULT_GRIDS = {
    "masking_scale": [((c_lo, c_hi), (t_lo, t_hi))
                      for (c_lo, c_hi) in ((0.65, 0.8), (0.75, 0.9), (0.85, 1.0))
                      for (t_lo, t_hi) in ((0.1, 0.15), (0.15, 0.2), (0.2, 0.25))],
    "loss_coeff": [0.5, 1.0, 2.5],
    "n_captions": [1, 2, 4, 8],
    "fusion": list(FUSIONS),
    "conditioner": list(CONDITIONERS),
}

FIELDS = ("kind", "point", "config_hash", "status", "steps", "l_predict", "l_sparse", "l_consistency",
          "total", "probe_train_acc", "probe_val_acc", "seconds", "error")


class AblationError(ValueError):
    pass


@dataclass
class SweepSettings:
    steps: int = 2000
    tail_fraction: float = 0.1      # final losses are averaged over this share of steps
    probe_size: int = 1024
    probe_seed: int = 12345
    probe: ProbeConfig = dataclasses.field(default_factory=ProbeConfig)
    workers: int = 1


def apply_point(base: TrainConfig, kind, value) -> TrainConfig:
    """Return a copy of ``base`` with one grid point applied."""
    cfg = TrainConfig.from_dict(base.to_dict())
    if kind == "masking_scale":
        (ctx, tgt) = value
        cfg.masking = dataclasses.replace(cfg.masking, context_scale=tuple(ctx), target_scale=tuple(tgt))
    elif kind == "loss_coeff":
        r = float(value)
        cfg.loss = dataclasses.replace(cfg.loss, lam=base.loss.lam * r, beta=base.loss.beta * r)
    elif kind == "n_captions":
        cfg.data = dataclasses.replace(cfg.data, num_captions=int(value))
    elif kind == "fusion":
        cfg.predictor = dataclasses.replace(cfg.predictor, fusion=str(value))
    elif kind == "conditioner":
        cfg.predictor = dataclasses.replace(cfg.predictor, conditioner=str(value))
    else:
        raise AblationError(f"unknown ablation kind {kind!r}; choose from {KINDS}")
    return cfg


def point_label(kind, value):
    if kind == "masking_scale":
        (c, t) = value
        return f"ctx={c[0]:g}-{c[1]:g};tgt={t[0]:g}-{t[1]:g}"
    return f"{value}" if kind in ("fusion", "conditioner") else f"{value:g}"


def _probe_data(cfg: TrainConfig, settings: SweepSettings):
    dc = dataclasses.replace(cfg.data, size=settings.probe_size, seed=settings.probe_seed)
    return SyntheticDataset(dc)


def run_point(base: TrainConfig, kind, value, settings: SweepSettings):
    """Train and probe one grid point; failures become rows, never exceptions."""
    label = point_label(kind, value)
    row = dict.fromkeys(FIELDS, "")
    row.update(kind=kind, point=label, status="failed", steps=0)
    t0 = time.perf_counter()
    try:
        cfg = apply_point(base, kind, value)
        cfg.max_steps = settings.steps
        cfg.epochs = max(cfg.epochs, math.ceil(settings.steps / cfg.steps_per_epoch))
        row["config_hash"] = cfg.digest()
        trainer = Trainer(cfg)
        rows = trainer.run()
        tail = rows[-max(1, int(len(rows) * settings.tail_fraction)):]
        for key in ("l_predict", "l_sparse", "l_consistency", "total"):
            row[key] = float(np.mean([r[key] for r in tail]))
        pdata = _probe_data(cfg, settings)
        res = linear_probe(trainer.state.pair.target, pdata.images.astype(np.dtype(cfg.dtype)),
                           pdata.labels, pdata.num_classes, cfg.encoder.patch_size, settings.probe)
        row.update(status="ok", steps=len(rows), probe_train_acc=res.train_accuracy,
                   probe_val_acc=res.val_accuracy)
    except NonFiniteLossError as e:
        row.update(status="nan", error=str(e))
    except (MaskSamplingError, ValueError) as e:
        row["error"] = f"{type(e).__name__}: {e}"
    row["seconds"] = round(time.perf_counter() - t0, 3)
    return row


def _run_point_args(args):
    return run_point(*args)


def run_sweep(base: TrainConfig, kind, grid=None, settings: SweepSettings | None = None,
              out_path=None, log=None):
    """Run every grid point of ``kind``; rows are written in grid order."""
    if kind not in KINDS:
        raise AblationError(f"unknown ablation kind {kind!r}; choose from {KINDS}")
    grid = DEFAULT_GRIDS[kind] if grid is None else list(grid)
    if not grid:
        raise AblationError("empty grid: nothing to sweep")
    settings = settings or SweepSettings()
    jobs = [(base, kind, value, settings) for value in grid]
    if settings.workers > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            rows = list(pool.map(_run_point_args, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(run_point(*job))
            if log:
                log(rows[-1])
    if out_path is not None:
        write_rows(rows, out_path)
    return rows


def write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
