"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--size 24] [--model model.ckpt]

Prints one row per kernel: microseconds per call for each backend and the
speedup, plus a whole-edit timing on the analytic conditional field and,
with ``--model``, on a trained field.
"""
import argparse
import time
import timeit

import numpy as np

from flowinv import bench, io, kernels
from flowinv.fields import ConditionalAnalyticField
from flowinv.uni_edit import EditConfig, uni_edit


def cases(size, rng):
    z, vs, vt = rng.standard_normal((3, 3, size, size))
    m = rng.random((size, size))
    a, b = rng.random((2, size, size))
    return {
        "channel_mean": lambda k: k.channel_mean(vt - vs, False),
        "minmax_normalize": lambda k: k.minmax_normalize(m, 1e-12),
        "edit_update": lambda k: k.edit_update(z, vs, vt, m, 5.0, -0.05),
        "analytic_velocity": lambda k: k.analytic_velocity(z, 0.4, np.zeros(3), 1.0),
        "ssim_channel": lambda k: k.ssim_channel(a, b, 8, 4, 1e-4, 9e-4),
    }


def with_backend(backend, fn, repeat):
    saved = kernels._impl
    kernels._impl = backend
    try:
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        return (time.perf_counter() - t0) / repeat
    finally:
        kernels._impl = saved


def analytic_edit():
    field = ConditionalAnalyticField({0: (-1.0, 1.0), 1: (1.0, 0.7)})
    z0 = np.random.default_rng(0).standard_normal((3, 24, 24))
    return lambda: uni_edit(field, z0, EditConfig(5.0, 0.6, 15, 0, 1))


def trained_edit(path):
    field, _ = io.load_checkpoint(path)
    case = bench.color_edit_cases(1, bench.HELDOUT_SEED)[0]
    return lambda: bench.run_edit(field, case, 15, 0.6, 5.0)


def edit_row(label, impls, fn, repeat):
    ms = [with_backend(impls[n], fn, repeat) * 1e3 for n in impls]
    row = f"{label:<20}" + "".join(f"{e:11.2f} ms" for e in ms)
    if len(ms) > 1:
        row += f"{ms[0] / ms[1]:10.2f}x"
    print(row)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--model", help="checkpoint for a trained-field edit timing")
    args = p.parse_args(argv)
    impls = kernels.backends()
    print(f"active backend: {kernels.BACKEND}; image {args.size}x{args.size}; {args.repeat} calls per timing")
    names = list(impls)
    print(f"{'kernel':<20}" + "".join(f"{n + ' us':>14}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    rng = np.random.default_rng(0)
    for name, fn in cases(args.size, rng).items():
        us = [min(timeit.repeat(lambda: fn(impls[n]), number=args.repeat, repeat=3)) / args.repeat * 1e6
              for n in names]
        row = f"{name:<20}" + "".join(f"{u:14.2f}" for u in us)
        if len(us) > 1:
            row += f"{us[0] / us[1]:10.2f}x"
        print(row)
    n_edits = max(1, args.repeat // 20)
    edit_row("edit, analytic", impls, analytic_edit(), n_edits)
    if args.model:
        edit_row("edit, trained", impls, trained_edit(args.model), n_edits)


if __name__ == "__main__":
    main()
