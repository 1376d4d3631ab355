"""Few-shot gate training: GFL_D whose first stage sees only a fraction of each task's training data.

Relative performance is the task-averaged ratio of a fraction's final scores to the full-data run's.
"""

import argparse
import os
import statistics

from _runs import ensure_data, run_all

from gflcl import cli, report


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/few_shot")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--fractions", default="0.05,0.1,0.2,0.5,1.0")
    p.add_argument("--order", default="KS,SID,ER")
    p.add_argument("--epoch-scale", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    order = args.order.split(",")
    fractions = [float(f) for f in args.fractions.split(",")]
    if 1.0 not in fractions:
        fractions.append(1.0)
    rel = {f: [] for f in fractions}
    for seed in [int(s) for s in args.seeds.split(",")]:
        root = os.path.join(args.out, f"s{seed}")
        raw = {"seed": seed, "order": order, "data_dir": os.path.join(root, "data")}
        ensure_data(raw, raw["data_dir"], order)
        payloads = [({**raw, "method": {"method": "gfl_d", "stage1_fraction": f, "epoch_scale": args.epoch_scale,
                                        "curve_every": 0}}, os.path.join(root, f"frac{f:g}"), f"frac{f:g}")
                    for f in fractions]
        run_all(payloads, args.jobs)
        finals = {f: cli._read_json(os.path.join(d, "summary.json"))["final"] for f, (_, d, _) in zip(fractions, payloads)}
        for f in fractions:
            rel[f].append(statistics.fmean(finals[f][t] / finals[1.0][t] for t in order))
    headers = ["stage1_fraction", "relative_performance", "stdev"]
    rows = [[f"{f:g}", f"{100 * statistics.fmean(v):.1f}", f"{100 * statistics.stdev(v):.1f}" if len(v) > 1 else "-"]
            for f, v in rel.items()]
    print(report.render_table(headers, rows), end="")
    with open(os.path.join(args.out, "few_shot.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv(headers, rows))


if __name__ == "__main__":
    main()
