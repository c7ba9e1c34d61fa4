"""Compare the compiled and numpy conv1d kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Times forward, weight-gradient and input-gradient passes at the shapes the
default classifier sees (batch 16, 12 leads, 500 samples) and checks that the
two backends agree.
"""
from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from ecgunlearn.kernels import backends

# (batch, c_in, c_out, length, kernel, stride, padding)
SHAPES = [
    (16, 12, 8, 500, 7, 2, 3),     # stem
    (16, 8, 8, 250, 3, 1, 1),      # stage 1 block
    (16, 16, 32, 125, 3, 2, 1),    # downsampling block
    (16, 64, 64, 16, 3, 1, 1),     # last stage
]


def _cases(rng, shape):
    n, cin, cout, length, k, stride, pad = shape
    x = rng.standard_normal((n, cin, length))
    w = rng.standard_normal((cout, cin, k))
    out_len = (length + 2 * pad - k) // stride + 1
    gy = rng.standard_normal((n, cout, out_len))
    return {
        "forward": lambda m: m.conv1d_forward(x, w, stride, pad),
        "grad_weight": lambda m: m.conv1d_backward_weight(gy, x, k, stride, pad),
        "grad_input": lambda m: m.conv1d_backward_input(gy, w, length, stride, pad),
    }


def run(repeat: int = 5, number: int = 20) -> list[dict]:
    impls = backends()
    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        for op, fn in _cases(rng, shape).items():
            ref = fn(impls["python"])
            row = {"shape": "x".join(map(str, shape)), "op": op}
            for name, mod in impls.items():
                err = float(np.max(np.abs(fn(mod) - ref)) / max(1.0, np.max(np.abs(ref))))
                best = min(timeit.repeat(lambda: fn(mod), repeat=repeat, number=number)) / number
                row[f"{name}_us"] = best * 1e6
                row[f"{name}_rel_err"] = err
            if "cython" in impls:
                row["speedup"] = row["python_us"] / row["cython_us"]
            rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--csv", help="also write the table to this CSV file")
    args = ap.parse_args(argv)
    if "cython" not in backends():
        print("compiled backend not built; timing the numpy kernels only", file=sys.stderr)
    rows = run(args.repeat, args.number)
    cols = list(rows[0])
    print("  ".join(f"{c:>16s}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>16.3g}" if isinstance(r[c], float) else f"{r[c]:>16s}" for c in cols))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
