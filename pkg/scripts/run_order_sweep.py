"""Task-order study: every permutation of a task list per method, with MEAN and STDEV rows."""

import argparse
import os
import sys

from gflcl import cli


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/order_sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", default="replay,gfl_d")
    p.add_argument("--order", default="KS,SID,ER")
    p.add_argument("--epoch-scale", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    data_dir = os.path.join(args.out, "data")
    if not os.path.exists(os.path.join(data_dir, "dataset.json")):
        code = cli.main(["gen", "--seed", str(args.seed), "--data-dir", data_dir, "--tasks", args.order])
        if code:
            sys.exit(code)
    for m in args.methods.split(","):
        code = cli.main(["train", "--method", m, "--order", args.order, "--seed", str(args.seed),
                         "--data-dir", data_dir, "--epoch-scale", str(args.epoch_scale), "--sweep-orders",
                         "--jobs", str(args.jobs), "--run-dir", os.path.join(args.out, m)])
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
