"""Command-line entry point: ``tcjepa {train,probe,gradcheck,ablate,export-maps,stats}``.

Config keys can be overridden with ``--section.key=value`` (or
``--key=value`` for top-level trainer keys) after the subcommand options.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("tcjepa")


class UsageError(Exception):
    pass


def _split_overrides(extra):
    """Turn leftover ``--a.b=v`` arguments into a dict; anything else is a usage error."""
    from .config import parse_value

    overrides = {}
    bad = []
    for arg in extra:
        if arg.startswith("--") and "=" in arg:
            key, value = arg[2:].split("=", 1)
            overrides[key.replace("-", "_")] = parse_value(value)
        else:
            bad.append(arg)
    if bad:
        raise UsageError(f"unrecognised arguments: {' '.join(bad)}")
    return overrides


def _resolve(args, extra):
    from .config import load_config

    overrides = _split_overrides(extra)
    if getattr(args, "conditioner", None):
        overrides["predictor.conditioner"] = args.conditioner
    if getattr(args, "fusion", None):
        overrides["predictor.fusion"] = args.fusion
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=False)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, extra):
    from .config import dump_config
    from .train import NonFiniteLossError, Trainer, load_checkpoint

    cfg = _resolve(args, extra)
    if args.dry_run:
        print(dump_config(cfg), end="")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    state = load_checkpoint(args.resume) if args.resume else None
    if state is not None:
        cfg = state.cfg
    trainer = Trainer(cfg, state=state)

    def progress(row):
        if row["step"] % max(1, args.log_every) == 0:
            log.info("step %d l_predict %.5f total %.5f lr %.2e", row["step"], row["l_predict"],
                     row["total"], row["lr"])

    try:
        trainer.run(steps=args.steps, metrics_path=out / "metrics.csv", checkpoint_dir=out / "checkpoints",
                    callback=progress)
    except NonFiniteLossError as e:
        log.error("aborted: %s", e)
        return 3
    log.info("finished at step %d; outputs in %s", trainer.state.step, out)
    return 0


def cmd_probe(args, extra):
    import dataclasses

    import numpy as np

    from .data import SyntheticDataset
    from .probe import ProbeConfig, linear_probe
    from .train import load_checkpoint

    overrides = _split_overrides(extra)
    pcfg = ProbeConfig(seed=args.probe_seed)
    for key, value in overrides.items():
        name = key.removeprefix("probe.")
        if name not in {f.name for f in dataclasses.fields(ProbeConfig)}:
            raise UsageError(f"unknown probe key {key!r}")
        setattr(pcfg, name, value)
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    data = SyntheticDataset(dataclasses.replace(cfg.data, seed=args.dataset_seed, size=args.size))
    labels = data.labels if not args.permute_labels else \
        np.random.default_rng(args.probe_seed).permutation(data.labels)
    res = linear_probe(state.pair.target, data.images.astype(np.dtype(cfg.dtype)), labels,
                       data.num_classes, cfg.encoder.patch_size, pcfg)
    _emit(res.as_dict(), args.out)
    return 0


def cmd_gradcheck(args, extra):
    from .gradcheck import format_report, run_gradcheck
    from .predictor import CONDITIONERS

    _split_overrides(extra)
    kinds = CONDITIONERS if args.all_conditioners else ("fine",)
    results = run_gradcheck(seed=args.seed or 0, tol=args.tol, conditioners=kinds)
    print(format_report(results))
    if args.out:
        _emit([r.__dict__ for r in results], args.out)
    return 0 if all(r.ok for r in results) else 1


def cmd_ablate(args, extra):
    import os

    from .ablate import SweepSettings, run_sweep

    cfg = _resolve(args, extra)
    grid = None
    if args.grid is not None:
        grid = json.loads(args.grid)
        if not isinstance(grid, list):
            raise UsageError("--grid must be a JSON list")
        if not grid:
            raise UsageError("--grid is empty: nothing to sweep")
    threads = int(os.environ.get("TCJEPA_THREADS", "1") or 1)
    settings = SweepSettings(steps=args.steps, probe_seed=args.probe_seed, workers=min(args.workers, threads))

    def progress(row):
        log.info("%s %s: %s probe=%s", row["kind"], row["point"], row["status"], row["probe_val_acc"])

    rows = run_sweep(cfg, args.kind, grid, settings, out_path=args.out, log=progress)
    n_bad = sum(r["status"] != "ok" for r in rows)
    log.info("%d/%d grid points ok; results in %s", len(rows) - n_bad, len(rows), args.out)
    return 0


def cmd_export_maps(args, extra):
    from .maps import export_maps
    from .train import load_checkpoint

    _split_overrides(extra)
    state = load_checkpoint(args.checkpoint)
    payload = export_maps(state, args.sample_seed)
    text = json.dumps(payload)
    Path(args.out).write_text(text)
    log.info("%d similarity records written to %s", len(payload["records"]), args.out)
    return 0


def cmd_stats(args, extra):
    from .stats import model_stats

    cfg = _resolve(args, extra)
    st = model_stats(cfg.encoder, cfg.predictor, cfg.masking, cfg.data.num_captions, cfg.data.caption_length)
    _emit(st.as_dict(), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    from .ablate import KINDS
    from .predictor import CONDITIONERS, FUSIONS

    p = argparse.ArgumentParser(prog="tcjepa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--conditioner", choices=CONDITIONERS)
        sp.add_argument("--fusion", choices=FUSIONS)
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="run the trainer")
    with_config(t)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--steps", type=int, help="run at most this many more steps; the schedules still span the full run")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("probe", help="linear probe on a checkpoint's target encoder")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--dataset-seed", type=int, default=999)
    pr.add_argument("--probe-seed", type=int, default=0)
    pr.add_argument("--size", type=int, default=1024)
    pr.add_argument("--permute-labels", action="store_true")
    pr.add_argument("--out")
    pr.set_defaults(fn=cmd_probe)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--all-conditioners", action="store_true")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="sweep one factor; one CSV row per grid point")
    a.add_argument("kind", choices=KINDS)
    with_config(a)
    a.add_argument("--grid", help="JSON list of grid values (default: built-in grid)")
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--probe-seed", type=int, default=12345)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", default="ablation.csv")
    a.set_defaults(fn=cmd_ablate)

    e = sub.add_parser("export-maps", help="write patch-word similarity maps as JSON")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--sample-seed", type=int, default=0)
    e.add_argument("--out", default="maps.json")
    e.set_defaults(fn=cmd_export_maps)

    s = sub.add_parser("stats", help="parameter and FLOP counts")
    with_config(s)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None):
    from .ablate import AblationError
    from .config import ConfigKeyError
    from .predictor import ConditionerConfigError
    from .train import CheckpointError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args, extra)
    except (UsageError, AblationError) as e:
        parser.error(str(e))
    except (ConfigKeyError, FileNotFoundError, CheckpointError, ConditionerConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
