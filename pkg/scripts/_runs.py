"""Small helpers shared by the experiment scripts."""

import os
from concurrent.futures import ProcessPoolExecutor

from gflcl import cli


def ensure_data(raw, data_dir, tasks=cli.ALL_TASKS):
    """Generate datasets once; later runs reuse them (and therefore share a data fingerprint)."""
    if not os.path.exists(os.path.join(data_dir, "dataset.json")):
        cli.generate_datasets(cli.config_from_dict({**raw, "data_dir": data_dir}), data_dir, tasks)


def run_all(payloads, jobs=1):
    """Train (config dict, run dir, label) payloads, skipping runs that already finished."""
    todo = [(raw, d, False, label) for raw, d, label in payloads
            if not os.path.exists(os.path.join(d, "summary.json"))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            list(ex.map(cli._run_worker, todo))
    else:
        for p in todo:
            cli._run_worker(p)
    return [d for _, d, _ in payloads]
