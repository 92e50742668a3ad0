"""Time the numba kernels against their numpy fallbacks.

Each kernel runs on a row block shaped like the activations of the default
desk-scale model; the end-to-end rows time full training steps with the
fine conditioner.  Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 20] [--json out.json]
"""

import argparse
import json
import time
import timeit

import numpy as np

from tcjepa import _kernels as K
from tcjepa.data import DataConfig
from tcjepa.predictor import PredictorConfig
from tcjepa.train import TrainConfig, Trainer


def kernel_cases(rng, rows, width, dtype):
    x = rng.normal(size=(rows, width)).astype(dtype)
    g = rng.normal(size=(rows, width)).astype(dtype)
    gamma = rng.normal(size=width).astype(dtype)
    beta = rng.normal(size=width).astype(dtype)
    y = K.softmax_fwd(x)
    _, xhat, rstd = K.layernorm_fwd(x, gamma, beta, 1e-6)
    _, t = K.gelu_fwd(x)
    return {
        "softmax_fwd": lambda: K.softmax_fwd(x),
        "softmax_bwd": lambda: K.softmax_bwd(y, g),
        "layernorm_fwd": lambda: K.layernorm_fwd(x, gamma, beta, 1e-6),
        "layernorm_bwd": lambda: K.layernorm_bwd(g, xhat, rstd, gamma),
        "gelu_fwd": lambda: K.gelu_fwd(x),
        "gelu_bwd": lambda: K.gelu_bwd(x, t, g),
    }


def time_kernels(backend, rows, width, dtype, repeat):
    K.use_numba(backend == "numba")
    cases = kernel_cases(np.random.default_rng(0), rows, width, dtype)
    out = {}
    for name, fn in cases.items():
        fn()  # compile / warm caches outside the timed region
        out[name] = min(timeit.repeat(fn, number=5, repeat=repeat)) / 5
    return out


def time_steps(backend, steps, batch_size):
    K.use_numba(backend == "numba")
    cfg = TrainConfig(predictor=PredictorConfig(conditioner="fine"), data=DataConfig(size=256),
                      batch_size=batch_size, max_steps=steps + 2)
    trainer = Trainer(cfg)
    trainer.run(steps=2)
    t0 = time.perf_counter()
    trainer.run(steps=steps)
    return (time.perf_counter() - t0) / steps


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=4096, help="rows per kernel call")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=20, help="training steps per backend (0 skips)")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--json", help="also write the results here")
    args = p.parse_args(argv)

    initial = K.numba_enabled()
    results = {"rows": args.rows, "width": args.width, "dtype": args.dtype, "kernels": {}, "train_step": {}}
    try:
        for backend in ("numpy", "numba"):
            results["kernels"][backend] = time_kernels(backend, args.rows, args.width, np.dtype(args.dtype),
                                                       args.repeat)
            if args.steps:
                results["train_step"][backend] = time_steps(backend, args.steps, args.batch_size)
    finally:
        K.use_numba(initial)

    print(f"{'kernel':<16}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for name, t_np in results["kernels"]["numpy"].items():
        t_nb = results["kernels"]["numba"][name]
        print(f"{name:<16}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>8.2f}x")
    if args.steps:
        t_np, t_nb = results["train_step"]["numpy"], results["train_step"]["numba"]
        print(f"{'train step':<16}{t_np * 1e3:>10.1f}ms{t_nb * 1e3:>10.1f}ms{t_np / t_nb:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
