"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each case is timed with timeit (best of --repeat) under every available
backend; the last column is the python/cython time ratio.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from tkl import _backend, data, nn
from tkl.nn import ModelSpec


def cases():
    rng = np.random.default_rng(0)
    out = []
    for label, spec, ds in [
        ("mlp p=2 r=10 N=1024", ModelSpec.mlp(2, 10), data.gen_ball_sphere(1024, 0)),
        ("mlp p=64 r=10 N=1024", ModelSpec.mlp(64, 10), data.two_peak_subset(64, 1024, 0)[0]),
        ("conv p=16 r=2 q=16 N=500", ModelSpec.conv1d_parity(16, 2),
         data.gen_xl_dataset(16, 4, 500, 0)),
        ("conv p=8 r=2 q=4 N=64", ModelSpec.conv1d_parity(8, 2, q=4),
         data.gen_xl_dataset(8, 4, 64, 0, outputs=4)),
    ]:
        w = rng.uniform(-1, 1, spec.n_params)
        X, Y = ds.inputs, ds.labels
        out.append((label, "forward", lambda s=spec, w=w, X=X: nn.predict(s, w, X)))
        out.append((label, "mse_grad", lambda s=spec, w=w, X=X, Y=Y: nn.mse_grad(s, w, X, Y)))
        out.append((label, "jacobian", lambda s=spec, w=w, X=X[:128]: nn.batch_jacobian(s, w, X)))
    return out


def best_of(fn, repeat):
    number, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    backends = _backend.available()
    rows = []
    for label, op, fn in cases():
        times = {}
        for b in backends:
            with _backend.use(b):
                times[b] = best_of(fn, args.repeat)
        ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
        rows.append([label, op] + [times[b] * 1e3 for b in backends] + [ratio])
    header = ["case", "op"] + [f"{b}_ms" for b in backends] + ["speedup"]
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'op':<9}" + "".join(f"{h:>12}" for h in header[2:]))
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:<9}" + "".join(f"{v:>12.3f}" for v in r[2:]))
    if "cython" not in backends:
        print("compiled backend not built; only the fallback was timed", file=sys.stderr)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)


if __name__ == "__main__":
    main()
