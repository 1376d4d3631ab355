"""Prompt-template by decoding ablation: train once per template, then score each model with and without
the label trie on the classification tasks."""

import argparse
import os

from _runs import ensure_data, run_all

from gflcl import cli, report
from gflcl.model import load_checkpoint
from gflcl.tasks import TEMPLATES, default_tasks


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/prompt_grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", default="gfl_d")
    p.add_argument("--order", default="KS,SID,ER,IC")
    p.add_argument("--epoch-scale", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    order = args.order.split(",")
    data_dir = os.path.join(args.out, "data")
    raw = {"seed": args.seed, "order": order, "data_dir": data_dir}
    ensure_data(raw, data_dir, order)
    payloads = [({**raw, "method": {"method": args.method, "template": t, "epoch_scale": args.epoch_scale}},
                 os.path.join(args.out, t), t) for t in TEMPLATES]
    run_all(payloads, args.jobs)

    specs = default_tasks()
    data, _ = cli.load_task_data(data_dir, order, "short")
    headers = ["template", "decoding"] + order
    rows = []
    for _, run_dir, template in payloads:
        summary = cli._read_json(os.path.join(run_dir, "summary.json"))
        model, _ = load_checkpoint(os.path.join(run_dir, "checkpoints", summary["final_checkpoint"]))
        for constrained in (False, True):
            res = cli.evaluate_checkpoint(model, specs, data, order, [template], [constrained])
            rows.append([template, "constrained" if constrained else "unconstrained"] + [r[3] for r in res])
    text = report.render_table(headers, rows)
    print(text, end="")
    with open(os.path.join(args.out, "prompt_grid.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv(headers, rows))


if __name__ == "__main__":
    main()
