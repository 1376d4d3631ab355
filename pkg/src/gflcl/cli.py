"""Command line entry point: gen, train, eval, report, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 missing input, 4 numeric failure.
The default output root is ``$GFLCL_OUTPUT_ROOT`` (else ``./runs``); datasets live under
``<root>/data/s<seed>`` unless ``--data-dir`` says otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__, decoding, metrics, report
from . import numerics as nx
from .continual import Harness, MethodConfig, ConfigurationError, StageFailure
from .gradcheck import TOLERANCE, run_gradcheck
from .model import (DecoderConfig, EncoderConfig, ModelConfig, StackCache, UnknownTaskError, Vocabulary, VocabularyError,
                    load_checkpoint)
from .tasks import TEMPLATES, FactorCodebook, default_tasks, generate_task_data, load_dataset, retemplate, save_dataset

log = logging.getLogger("gflcl")

ENV_OUTPUT_ROOT = "GFLCL_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
ALL_TASKS = ("KS", "SID", "ER", "IC", "SF", "ASR")


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


# -- configuration -----------------------------------------------------------------------------


@dataclass
class DataConfig:
    sizes: dict = field(default_factory=lambda: {"train": 800, "validation": 200, "test": 200})
    noise: float = 0.1
    nuisance: float = 0.7
    codebook_scale: float = 1.0
    template: str = "short"


@dataclass
class ModelDims:
    encoder_width: int = 32
    decoder_width: int = 64
    heads: int = 4
    blocks: int = 2


@dataclass
class RunConfig:
    """Everything that determines a run. Prompt template, constrained decoding and evaluation
    cadence live in the ``method`` section (they are MethodConfig fields)."""

    seed: int = 0
    order: list = field(default_factory=lambda: list(ALL_TASKS))
    method: MethodConfig = field(default_factory=MethodConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=ModelDims)
    data_dir: str | None = None

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ConfigError(f"order: duplicate task ids in {self.order}")
        unknown = [t for t in self.order if t not in ALL_TASKS]
        if unknown:
            raise ConfigError(f"order: unknown task ids {unknown}")
        if self.method.template not in TEMPLATES:
            raise ConfigError(f"method.template: must be one of {TEMPLATES}")

    def to_dict(self):
        return asdict(self)

    def model_config(self):
        enc = EncoderConfig(width=self.model.encoder_width, seed=self.seed)
        dec = DecoderConfig(width=self.model.decoder_width, heads=self.model.heads, blocks=self.model.blocks,
                            seed=self.seed)
        return ModelConfig(enc, dec, temperature=self.method.gfl_temperature)


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if isinstance(default, (list, tuple)) and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a table, got {value!r}")
    return value


def _section(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix}: expected a table")
    base = cls()
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{prefix}.{k}: unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            default = getattr(base, f.name)
            if default is None:
                kwargs[f.name] = raw[f.name]
            else:
                kwargs[f.name] = _coerce(f"{prefix}.{f.name}", raw[f.name], default)
    try:
        return cls(**{**asdict(base), **kwargs})
    except (ConfigurationError, TypeError, ValueError) as e:
        raise ConfigError(f"{prefix}: {e}") from None


def config_from_dict(raw):
    """Strict parse of a config document; unknown or mistyped fields raise ConfigError naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    top = {"seed", "order", "method", "data", "model", "data_dir"}
    for k in raw:
        if k not in top:
            raise ConfigError(f"{k}: unknown field")
    base = RunConfig()
    seed = _coerce("seed", raw.get("seed", base.seed), 0)
    order = _coerce("order", raw.get("order", base.order), [])
    data_dir = raw.get("data_dir")
    if data_dir is not None and not isinstance(data_dir, str):
        raise ConfigError("data_dir: expected a string")
    data = _section(DataConfig, raw.get("data", {}), "data")
    data.sizes = {**DataConfig().sizes, **data.sizes}
    for split in ("train", "validation", "test"):
        n = data.sizes.get(split)
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            raise ConfigError(f"data.sizes.{split}: expected a positive integer")
    return RunConfig(seed, list(order), _section(MethodConfig, raw.get("method", {}), "method"), data,
                     _section(ModelDims, raw.get("model", {}), "model"), data_dir)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise MissingInputError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: {path} is not valid JSON ({e})") from None
    return config_from_dict(raw)


def output_root():
    return os.environ.get(ENV_OUTPUT_ROOT, "runs")


def data_dir_for(cfg: RunConfig):
    return cfg.data_dir or os.path.join(output_root(), "data", f"s{cfg.seed}")


# -- files -----------------------------------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _prepare_dir(path, overwrite):
    if os.path.isdir(path) and os.listdir(path) and not overwrite:
        raise ConfigError(f"output directory {path} is not empty (pass --overwrite)")
    os.makedirs(path, exist_ok=True)


class RunManifest:
    """Config snapshot, code version, timestamps and per-artifact checksums of one run directory."""

    NAME = "manifest.json"

    def __init__(self, run_dir, config):
        self.run_dir = run_dir
        self.doc = {"config": config, "version": __version__, "started": time.time(), "finished": None,
                    "artifacts": {}}

    def write(self):
        _write_json(os.path.join(self.run_dir, self.NAME), self.doc)

    def finalize(self):
        arts = {}
        for root, _, files in os.walk(self.run_dir):
            for f in sorted(files):
                p = os.path.join(root, f)
                rel = os.path.relpath(p, self.run_dir)
                if rel != self.NAME:
                    arts[rel.replace(os.sep, "/")] = sha256_file(p)
        self.doc["artifacts"] = dict(sorted(arts.items()))
        self.doc["finished"] = time.time()
        self.write()


def verify_manifest(run_dir):
    """Artifacts whose checksum no longer matches the manifest (missing files included)."""
    doc = _read_json(os.path.join(run_dir, RunManifest.NAME))
    bad = []
    for rel, digest in doc["artifacts"].items():
        p = os.path.join(run_dir, rel)
        if not os.path.exists(p) or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# -- gen ------------------------------------------------------------------------------------------


def generate_datasets(cfg: RunConfig, out_dir, tasks=ALL_TASKS, overwrite=False):
    specs = default_tasks(sizes=cfg.data.sizes)
    targets = [os.path.join(out_dir, f"{t}.jsonl") for t in tasks]
    existing = [p for p in targets + [os.path.join(out_dir, "dataset.json")] if os.path.exists(p)]
    if existing and not overwrite:
        raise ConfigError(f"dataset files already exist in {out_dir} (pass --overwrite)")
    os.makedirs(out_dir, exist_ok=True)
    cb = FactorCodebook(cfg.seed, cfg.data.codebook_scale)
    info = {"seed": cfg.seed, "data": asdict(cfg.data), "files": {}}
    summary = {}
    for t, path in zip(tasks, targets):
        data = generate_task_data(specs[t], cb, cfg.seed, cfg.data.template, cfg.data.noise, cfg.data.nuisance)
        save_dataset(path, data, cfg.seed, cfg.data.template)
        info["files"][t] = sha256_file(path)
        summary[t] = data
    _write_json(os.path.join(out_dir, "dataset.json"), info)
    return summary, info


def label_histogram(samples):
    hist = {}
    for s in samples:
        key = s.label if s.label is not None else f"len={len(s.target) - 1}"
        hist[key] = hist.get(key, 0) + 1
    return dict(sorted(hist.items()))


def cmd_gen(args):
    cfg = resolve_config(args)
    out = args.data_dir or data_dir_for(cfg)
    tasks = _task_list(args.tasks) if args.tasks else ALL_TASKS
    summary, info = generate_datasets(cfg, out, tasks, args.overwrite)
    for t, data in summary.items():
        n = {k: len(v) for k, v in data.splits().items()}
        print(f"{t}: {sum(n.values())} samples ({n['train']}/{n['validation']}/{n['test']})  "
              f"sha256 {info['files'][t][:12]}")
        hist = label_histogram(data.all_samples())
        shown = ", ".join(f"{k}:{v}" for k, v in list(hist.items())[:12])
        more = f" ... (+{len(hist) - 12} more)" if len(hist) > 12 else ""
        print(f"  {shown}{more}")
    print(f"wrote {len(summary)} dataset files to {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------------------


def load_task_data(data_dir, order, template):
    """Datasets for ``order`` plus a fingerprint of the files used."""
    meta_path = os.path.join(data_dir, "dataset.json")
    if not os.path.exists(meta_path):
        raise MissingInputError(f"no datasets in {data_dir}; run `gen` first")
    meta = _read_json(meta_path)
    specs = default_tasks()
    data, digests = {}, {}
    for t in order:
        path = os.path.join(data_dir, f"{t}.jsonl")
        if not os.path.exists(path):
            raise MissingInputError(f"dataset {path} missing; run `gen` first")
        digests[t] = meta["files"].get(t) or sha256_file(path)
        split, header = load_dataset(path)
        if header["template"] != template and specs[t].kind == "classification":
            split = retemplate(split, specs[t], template)
        data[t] = split
    fp = hashlib.sha256(json.dumps(dict(sorted(digests.items()))).encode()).hexdigest()
    return data, fp


def _gate_report(model):
    if model.gate is None:
        return None
    out = {}
    for t, row in model.gate.rows.items():
        w = model.gate.weights(t).data
        out[t] = {"weights": [round(float(x), 6) for x in w], "argmax": int(np.argmax(w))}
    return out


def _matrix_summary(matrix):
    if matrix.joint or matrix.size < 2:
        return {}, None
    return metrics.task_forgetting(matrix), metrics.average_forgetting(matrix, matrix.size)


def run_training(cfg: RunConfig, run_dir, overwrite=False, label=None):
    """One training run into ``run_dir``; returns the summary dict also written to summary.json."""
    data, fingerprint = load_task_data(data_dir_for(cfg), cfg.order, cfg.method.template)
    _prepare_dir(run_dir, overwrite)
    manifest = RunManifest(run_dir, {**cfg.to_dict(), "data_dir": data_dir_for(cfg)})
    manifest.doc["data_fingerprint"] = fingerprint
    manifest.write()
    specs = default_tasks()
    vocab = Vocabulary.build(specs.values())
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    harness = Harness(specs, data, vocab, cfg.model_config(), cfg.seed, out_dir=ckpt_dir)
    m = cfg.method
    if m.method == "mtl":
        result = harness.run_mtl(cfg.order, m)
    elif m.method == "gfl_d":
        result = harness.run_gfl_double_stage(cfg.order, m)
    else:
        result = harness.train_sequence(cfg.order, m)
    tf, af = _matrix_summary(result.matrix)
    summary = {
        "label": label or m.method,
        "method": m.method,
        "seed": cfg.seed,
        "order": cfg.order,
        "data_fingerprint": fingerprint,
        "final": result.matrix.final_scores(),
        "higher_is_better": result.matrix.higher_is_better,
        "task_forgetting": tf,
        "average_forgetting": af,
        "curves": [[c.step, c.trained_task, c.task, c.score] for c in result.state.curves],
        "steps_per_task": result.state.steps_per_task,
        "stopped_early": result.state.stopped_early,
        "gate": _gate_report(result.model),
        "final_checkpoint": sorted(os.listdir(ckpt_dir))[-1] if os.listdir(ckpt_dir) else None,
    }
    _write_text(os.path.join(run_dir, "matrix.csv"), result.matrix.to_csv())
    _write_text(os.path.join(run_dir, "curves.csv"), report.curves_csv([report.RunSummary.from_dict(summary)]))
    stage1 = getattr(result, "stage1", None)
    if stage1 is not None:
        _write_text(os.path.join(run_dir, "stage1_matrix.csv"), stage1.matrix.to_csv())
        summary["stage1"] = {"final": stage1.matrix.final_scores(), "gate": _gate_report(stage1.model),
                             "fraction": m.stage1_fraction, "steps_per_task": stage1.state.steps_per_task}
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    manifest.finalize()
    return summary


def _run_worker(payload):
    cfg_dict, run_dir, overwrite, label = payload
    cfg = config_from_dict(cfg_dict)
    return run_training(cfg, run_dir, overwrite, label)


def _order_name(order):
    return "-".join(order)


def cmd_train(args):
    cfg = resolve_config(args)
    base = args.run_dir or os.path.join(output_root(), f"{cfg.method.method}_{_order_name(cfg.order)}_s{cfg.seed}")
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    data_dir_for(cfg)  # resolved eagerly so workers agree
    if not args.sweep_orders:
        s = run_training(cfg, base, args.overwrite)
        _print_run(s)
        return EXIT_OK
    _prepare_dir(base, args.overwrite)
    payloads = []
    for perm in itertools.permutations(cfg.order):
        d = cfg.to_dict()
        d["order"] = list(perm)
        d["data_dir"] = data_dir_for(cfg)
        payloads.append((d, os.path.join(base, _order_name(perm)), args.overwrite, f"{cfg.method.method}:{_order_name(perm)}"))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            summaries = list(ex.map(_run_worker, payloads))
    else:
        summaries = [_run_worker(p) for p in payloads]
    runs = [report.RunSummary.from_dict(s) for s in summaries]
    for name, (headers, rows) in report.order_tables(runs).items():
        text = report.render_table(headers, rows)
        print(text)
        _write_text(os.path.join(base, "order_summary.txt"), text)
        _write_text(os.path.join(base, "order_summary.csv"), report.to_csv(headers, rows))
    return EXIT_OK


def _print_run(s):
    print(f"{s['method']} seed {s['seed']} order {' -> '.join(s['order'])}")
    for t, v in s["final"].items():
        f = s["task_forgetting"].get(t) if s["task_forgetting"] else None
        print(f"  {t:4s} {v:7.2f}" + (f"  forgetting {f:6.2f}" if f is not None else ""))
    if s["average_forgetting"] is not None:
        print(f"  AF {s['average_forgetting']:.2f}")
    if s.get("gate"):
        print("  gate argmax: " + ", ".join(f"{t}->{g['argmax']}" for t, g in s["gate"].items()))


# -- eval -----------------------------------------------------------------------------------------


def evaluate_checkpoint(model, specs, data, tasks, templates, constraints, split="test"):
    """Rows of (task, template, constrained, score, parse failures, n) for the requested grid."""
    cache = StackCache(model.encoder)
    rows = []
    for t in tasks:
        spec = specs[t]
        if f"<|{t}|>" not in model.vocab:
            raise VocabularyError(f"task tag <|{t}|> absent from checkpoint vocabulary")
        for template in templates:
            d = retemplate(data[t], spec, template) if spec.kind == "classification" else data[t]
            samples = d.splits()[split]
            for constrained in constraints:
                if constrained and spec.kind != "classification":
                    continue
                score, records = decoding.evaluate(model, spec, samples, cache, template, constrained)
                fails = decoding.parse_failures(records) if spec.kind == "classification" else 0
                rows.append([t, template, "constrained" if constrained else "unconstrained",
                             f"{score:.2f}", str(fails), str(len(samples))])
    return rows


def cmd_eval(args):
    run_dir = args.run_dir
    man_path = os.path.join(run_dir, RunManifest.NAME)
    if not os.path.exists(man_path):
        raise MissingInputError(f"{run_dir} is not a run directory (no manifest)")
    manifest = _read_json(man_path)
    summary_path = os.path.join(run_dir, "summary.json")
    ckpt = args.checkpoint
    if ckpt is None:
        if not os.path.exists(summary_path):
            raise MissingInputError(f"{run_dir} has no summary.json; pass --checkpoint")
        ckpt = os.path.join(run_dir, "checkpoints", _read_json(summary_path)["final_checkpoint"])
    if not os.path.exists(ckpt):
        raise MissingInputError(f"checkpoint {ckpt} not found")
    model, meta = load_checkpoint(ckpt)
    cfg = manifest["config"]
    tasks = _task_list(args.tasks) if args.tasks else list(cfg["order"])
    specs = default_tasks()
    if args.grid:
        templates, constraints = list(TEMPLATES), [False, True]
        tasks = [t for t in tasks if specs[t].kind == "classification"]
    else:
        templates = [args.template or cfg["method"]["template"]]
        constraints = [not args.unconstrained]
    for t in tasks:
        if f"<|{t}|>" not in model.vocab:
            raise VocabularyError(f"task tag <|{t}|> absent from checkpoint vocabulary")
        if model.gate is not None and t not in model.gate.rows:
            raise ConfigError(f"task {t} was never trained in {os.path.basename(ckpt)}")
    data, _ = load_task_data(cfg["data_dir"], tasks, "short")
    rows = evaluate_checkpoint(model, specs, data, tasks, templates, constraints, args.split)
    headers = ["task", "template", "decoding", "score", "parse_failures", "n"]
    text = report.render_table(headers, rows)
    print(text, end="")
    stem = os.path.splitext(os.path.basename(ckpt))[0]
    tag = "grid" if args.grid else f"{templates[0]}_{'c' if constraints[0] else 'u'}"
    out = args.out or os.path.join(run_dir, f"eval_{stem}_{tag}.csv")
    _write_text(out, report.to_csv(headers, rows))
    print(f"wrote {out}")
    return EXIT_OK


# -- report ----------------------------------------------------------------------------------------


def _collect_runs(paths):
    runs = []
    for p in paths:
        sp = os.path.join(p, "summary.json")
        if os.path.exists(sp):
            runs.append((p, _read_json(sp)))
            continue
        subs = sorted(d for d in os.listdir(p) if os.path.exists(os.path.join(p, d, "summary.json"))) \
            if os.path.isdir(p) else []
        if not subs:
            raise MissingInputError(f"{p} holds no completed run")
        runs += [(os.path.join(p, d), _read_json(os.path.join(p, d, "summary.json"))) for d in subs]
    return runs


def build_report(run_dirs, out_dir):
    """Write tables, CSVs and per-task SVG curves for the given runs; returns the written file names."""
    loaded = _collect_runs(run_dirs)
    labels = [s["label"] for _, s in loaded]
    dup = len(set(labels)) != len(labels)
    runs = [report.RunSummary.from_dict(s, f"{s['label']}@{os.path.basename(os.path.normpath(p))}" if dup else None)
            for p, s in loaded]
    report.check_comparable(runs)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    headers, rows, mr = report.method_table(runs)
    _write_text(os.path.join(out_dir, "report_table.txt"), report.render_table(headers, rows))
    _write_text(os.path.join(out_dir, "report_table.csv"), report.to_csv(headers, rows))
    written += ["report_table.txt", "report_table.csv"]
    for name, (h, r) in report.order_tables(runs).items():
        _write_text(os.path.join(out_dir, f"report_orders_{name}.txt"), report.render_table(h, r))
        _write_text(os.path.join(out_dir, f"report_orders_{name}.csv"), report.to_csv(h, r))
        written += [f"report_orders_{name}.txt", f"report_orders_{name}.csv"]
    _write_text(os.path.join(out_dir, "report_curves.csv"), report.curves_csv(runs))
    written.append("report_curves.csv")
    for t in runs[0].order:
        series = report.curve_series(runs, t)
        hib = runs[0].higher_is_better[t]
        svg = report.svg_lines(series, title=f"{t} during training", y_label="score" if hib else "WER")
        _write_text(os.path.join(out_dir, f"curves_{t}.svg"), svg)
        written.append(f"curves_{t}.svg")
    return written, (headers, rows, mr)


def cmd_report(args):
    if args.scores:
        if not os.path.exists(args.scores):
            raise MissingInputError(f"score table {args.scores} not found")
        with open(args.scores, encoding="utf-8") as fh:
            headers, rows, _ = report.offline_table(fh.read())
        text = report.render_table(headers, rows)
        print(text, end="")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _write_text(os.path.join(args.out, "offline_table.txt"), text)
            _write_text(os.path.join(args.out, "offline_table.csv"), report.to_csv(headers, rows))
        return EXIT_OK
    if not args.run_dirs:
        raise ConfigError("report: pass run directories or --scores")
    out = args.out or (args.run_dirs[0] if len(args.run_dirs) == 1 else os.path.join(output_root(), "report"))
    written, (headers, rows, mr) = build_report(args.run_dirs, out)
    print(report.render_table(headers, rows), end="")
    if mr is None:
        print("(single method: MR omitted)")
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------------------------


def cmd_gradcheck(args, components=None):
    results = run_gradcheck(components, probes=args.probes, seed=args.seed)
    failed = [r for r in results if not r.passed]
    width = max(len(r.component) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component.ljust(width)}  worst {r.worst_error:.3e}  at {r.worst_param}  "
              f"({r.probes} probes)  {status}")
    if failed:
        print("gradient check FAILED for: " + ", ".join(f"{r.component} (parameter {r.worst_param})"
                                                        for r in failed))
        return EXIT_NUMERIC
    print(f"all {len(results)} components below {TOLERANCE:g}")
    return EXIT_OK


# -- argument handling --------------------------------------------------------------------------------


def _task_list(text):
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tasks if t not in ALL_TASKS]
    if bad:
        raise ConfigError(f"order: unknown task ids {bad}")
    return tasks


_METHOD_FLAGS = {
    "method": "method", "lr": "lr", "batch_size": "batch_size", "epoch_scale": "epoch_scale",
    "stage1_fraction": "stage1_fraction", "template": "template", "eval_every": "eval_every",
    "curve_every": "curve_every", "buffer_capacity": "buffer_capacity", "patience": "patience",
}


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    doc = {}
    if getattr(args, "config", None):
        doc = load_config(args.config).to_dict()
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "order", None):
        doc["order"] = _task_list(args.order)
    if getattr(args, "data_dir", None):
        doc["data_dir"] = args.data_dir
    method = dict(doc.get("method", {}))
    for flag, key in _METHOD_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            method[key] = v
    if getattr(args, "unconstrained", False):
        method["constrained"] = False
    if getattr(args, "no_gfl_replay", False):
        method["gfl_replay"] = False
    if method:
        doc["method"] = method
    if getattr(args, "train_size", None) is not None:
        data = dict(doc.get("data", {}))
        sizes = dict(data.get("sizes", DataConfig().sizes))
        sizes["train"] = args.train_size
        data["sizes"] = sizes
        doc["data"] = data
    return config_from_dict(doc)


def build_parser():
    p = argparse.ArgumentParser(prog="gflcl", description="Continual learning with gated fusion of encoder layers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (sections: method, data, model)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data-dir")

    g = sub.add_parser("gen", help="generate and save the synthetic task datasets")
    common(g)
    g.add_argument("--tasks", help="comma-separated task ids (default: all six)")
    g.add_argument("--train-size", type=int)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one method over a task order")
    common(t)
    t.add_argument("--method", choices=["ft", "replay", "lwf", "derpp", "mtl", "gfl_s", "gfl_d"])
    t.add_argument("--order", help="comma-separated task order, e.g. KS,SID,ER")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epoch-scale", type=float)
    t.add_argument("--stage1-fraction", type=float, help="GFL_D stage-1 training fraction (few-shot)")
    t.add_argument("--template", choices=TEMPLATES)
    t.add_argument("--unconstrained", action="store_true")
    t.add_argument("--no-gfl-replay", action="store_true")
    t.add_argument("--buffer-capacity", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--curve-every", type=int)
    t.add_argument("--run-dir")
    t.add_argument("--overwrite", action="store_true")
    t.add_argument("--sweep-orders", action="store_true", help="run every permutation of --order")
    t.add_argument("--jobs", type=int, default=1, help="parallel runs for --sweep-orders")
    t.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under prompt/decoding options")
    e.add_argument("run_dir")
    e.add_argument("--checkpoint")
    e.add_argument("--tasks")
    e.add_argument("--template", choices=TEMPLATES)
    e.add_argument("--unconstrained", action="store_true")
    e.add_argument("--grid", action="store_true", help="all templates x {unconstrained, constrained}")
    e.add_argument("--split", default="test", choices=["train", "validation", "test"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tables and learning curves for finished runs")
    r.add_argument("run_dirs", nargs="*")
    r.add_argument("--scores", help="offline mode: CSV of method,<task>,... final scores")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full loss")
    gc.add_argument("--probes", type=int, default=32)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, VocabularyError, UnknownTaskError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (nx.NumericError, StageFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except report.ComparabilityError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
