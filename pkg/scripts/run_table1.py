"""Main comparison: every method over the six-task order, summarised with final scores, forgetting and MR."""

import argparse
import os

from _runs import ensure_data, run_all

from gflcl import cli, report

METHODS = ("mtl", "ft", "replay", "lwf", "derpp", "gfl_s", "gfl_d")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/table1")
    p.add_argument("--seeds", default="0", help="comma-separated seeds; each gets its own dataset")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--epoch-scale", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    for seed in [int(s) for s in args.seeds.split(",")]:
        root = os.path.join(args.out, f"s{seed}")
        raw = {"seed": seed, "data_dir": os.path.join(root, "data"), "method": {"epoch_scale": args.epoch_scale}}
        ensure_data(raw, raw["data_dir"])
        payloads = [({**raw, "method": {**raw["method"], "method": m}}, os.path.join(root, m), m)
                    for m in args.methods.split(",")]
        dirs = run_all(payloads, args.jobs)
        _, (headers, rows, _) = cli.build_report(dirs, os.path.join(root, "report"))
        print(f"seed {seed}")
        print(report.render_table(headers, rows))


if __name__ == "__main__":
    main()
