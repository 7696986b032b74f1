#!/usr/bin/env python3
"""Approximation error of quantization-aware PWL tables vs piece count.

Builds tables for tanh, sigmoid and exp over representative 8-bit input
ranges and reports the max/mean absolute error on the quantized grid for a
sweep of piece counts.  More pieces always tighten the approximation; the
marginal gain fades quickly past ~16 pieces for these functions.
"""
import argparse

import numpy as np

from qlstm.pwl import ACTIVATIONS, build_pwl, eval_pwl_real
from qlstm.quant import compute_qparams, dequantize

CASES = [
    ("tanh", (-4.0, 4.0), (-1.0, 1.0)),
    ("sigmoid", (-8.0, 8.0), (0.0, 1.0)),
    ("exp", (-8.0, 0.0), (0.0, 1.0)),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pieces", type=int, nargs="+", default=[2, 4, 8, 16, 32, 64, 128, 255])
    parser.add_argument("--csv", default=None, help="optional CSV output path")
    args = parser.parse_args()

    rows = []
    for name, in_range, out_range in CASES:
        in_qp = compute_qparams(*in_range, 8)
        out_qp = compute_qparams(*out_range, 8)
        grid = dequantize(np.arange(256), in_qp)
        truth = ACTIVATIONS[name](grid)
        for pieces in args.pieces:
            t = build_pwl(name, in_qp, out_qp, pieces)
            err = np.abs(eval_pwl_real(grid, t) - truth)
            rows.append((name, pieces, float(err.max()), float(err.mean())))

    print(f"{'function':<10} {'pieces':>6} {'max_abs_err':>12} {'mean_abs_err':>13}")
    for name, pieces, emax, emean in rows:
        print(f"{name:<10} {pieces:>6} {emax:>12.6f} {emean:>13.6f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("function,pieces,max_abs_err,mean_abs_err\n")
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
