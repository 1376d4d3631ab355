"""Plain-text tables, CSV and dependency-free SVG line charts for run summaries."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

from . import metrics

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


class ComparabilityError(ValueError):
    pass


@dataclass
class RunSummary:
    """What the report needs from one finished run (read from its ``summary.json``)."""

    label: str
    method: str
    seed: int
    order: list
    data_fingerprint: str
    final: dict  # task -> final score
    higher_is_better: dict
    task_forgetting: dict = field(default_factory=dict)  # task -> forgetting (None for the last task)
    average_forgetting: float | None = None
    curves: list = field(default_factory=list)  # (global_step, trained_task, eval_task, score)

    @classmethod
    def from_dict(cls, d, label=None):
        return cls(label or d.get("label") or d["method"], d["method"], d["seed"], list(d["order"]),
                   d["data_fingerprint"], d["final"], d["higher_is_better"], d.get("task_forgetting", {}),
                   d.get("average_forgetting"), [tuple(c) for c in d.get("curves", [])])


def _fmt(v, digits=2):
    return "-" if v is None else f"{v:.{digits}f}"


def render_table(headers, rows):
    """Fixed-width text table; every cell is already a string."""
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    line = lambda cells: "  ".join(str(c).rjust(w) if i else str(c).ljust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(headers), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def to_csv(headers, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    w.writerows(rows)
    return buf.getvalue()


def check_comparable(runs):
    prints = {r.data_fingerprint for r in runs}
    if len(prints) > 1:
        raise ComparabilityError(f"runs use different datasets: {sorted(prints)}")
    task_sets = {frozenset(r.final) for r in runs}
    if len(task_sets) > 1:
        raise ComparabilityError("runs cover different task sets")


def method_table(runs):
    """Per-method final scores and forgetting (averaged over that method's runs), plus MR.

    Returns (headers, rows, mean_rank or None). MR needs at least two methods.
    """
    check_comparable(runs)
    tasks = list(runs[0].order)
    hib = {t: runs[0].higher_is_better[t] for t in tasks}
    by_method = {}
    for r in runs:
        by_method.setdefault(r.method, []).append(r)
    scores, forget, avg_af = {}, {}, {}
    for m, rs in by_method.items():
        scores[m] = {t: statistics.fmean(r.final[t] for r in rs) for t in tasks}
        forget[m] = {}
        for t in tasks:
            vals = [r.task_forgetting.get(t) for r in rs if r.task_forgetting.get(t) is not None]
            forget[m][t] = statistics.fmean(vals) if vals else None
        afs = [r.average_forgetting for r in rs if r.average_forgetting is not None]
        avg_af[m] = statistics.fmean(afs) if afs else None
    mr = metrics.mean_rank(scores, hib) if len(by_method) >= 2 else None
    headers = ["method"]
    for t in tasks:
        headers += [t, f"{t}_AF"]
    headers += ["AF"] + (["MR"] if mr else [])
    rows = []
    for m in by_method:
        row = [m]
        for t in tasks:
            row += [_fmt(scores[m][t]), _fmt(forget[m][t])]
        row.append(_fmt(avg_af[m]))
        if mr:
            row.append(_fmt(mr[m]))
        rows.append(row)
    return headers, rows, mr


def order_tables(runs):
    """Final scores per task order with MEAN/STDEV rows, for each method that has several orders."""
    check_comparable(runs)
    out = {}
    by_method = {}
    for r in runs:
        by_method.setdefault((r.method, r.seed), []).append(r)
    for (m, seed), rs in by_method.items():
        orders = {tuple(r.order) for r in rs}
        if len(orders) < 2:
            continue
        tasks = sorted(rs[0].final, key=rs[0].order.index)
        headers = ["order"] + tasks
        rows = [[" - ".join(r.order)] + [_fmt(r.final[t]) for t in tasks] for r in rs]
        cols = [[r.final[t] for r in rs] for t in tasks]
        rows.append(["MEAN"] + [_fmt(statistics.fmean(c)) for c in cols])
        rows.append(["STDEV"] + [_fmt(statistics.stdev(c)) for c in cols])
        out[f"{m}_s{seed}"] = (headers, rows)
    return out


def offline_table(text):
    """Score table from CSV ``method,<task>,...``; an optional ``higher_is_better`` row gives directions
    (1/0), otherwise WER-scored tasks (ASR) count as lower-is-better."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "method":
        raise ValueError("offline score table must start with a 'method,<task>,...' header")
    tasks = rows[0][1:]
    hib = {t: t != "ASR" for t in tasks}
    scores = {}
    for r in rows[1:]:
        if not r:
            continue
        if r[0] == "higher_is_better":
            hib = {t: v.strip() not in ("0", "false", "False") for t, v in zip(tasks, r[1:])}
            continue
        scores[r[0]] = {t: float(v) for t, v in zip(tasks, r[1:])}
    mr = metrics.mean_rank(scores, hib)
    headers = ["method"] + tasks + ["MR"]
    out = [[m] + [_fmt(scores[m][t]) for t in tasks] + [_fmt(mr[m])] for m in scores]
    return headers, out, mr


# -- SVG ---------------------------------------------------------------------------------------


def svg_lines(series, title="", width=520, height=320, y_label="score"):
    """Polyline chart. ``series`` maps a legend label to a list of (x, y) points."""
    pad_l, pad_r, pad_t, pad_b = 50, 130, 30, 40
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0, 1]
    ys = [p[1] for p in pts] or [0, 1]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(100.0, max(ys))
    x1 = x1 if x1 > x0 else x0 + 1
    sx = lambda x: pad_l + (x - x0) / (x1 - x0) * (width - pad_l - pad_r)
    sy = lambda y: height - pad_b - (y - y0) / (y1 - y0) * (height - pad_t - pad_b)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    bx0, bx1, by0, by1 = sx(x0), sx(x1), sy(y0), sy(y1)
    out.append(f'<polyline points="{bx0:.1f},{by1:.1f} {bx0:.1f},{by0:.1f} {bx1:.1f},{by0:.1f}" '
               f'fill="none" stroke="black"/>')
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        out.append(f'<text x="{bx0 - 4:.1f}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.0f}</text>')
        xv = x0 + frac * (x1 - x0)
        out.append(f'<text x="{sx(xv):.1f}" y="{by0 + 16:.1f}" text-anchor="middle">{xv:.0f}</text>')
    out.append(f'<text x="{(bx0 + bx1) / 2:.1f}" y="{height - 6}" text-anchor="middle">step</text>')
    out.append(f'<text x="12" y="{(by0 + by1) / 2:.1f}" transform="rotate(-90 12 {(by0 + by1) / 2:.1f})" '
               f'text-anchor="middle">{escape(y_label)}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if s:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(s))
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = pad_t + 14 * i + 8
        out.append(f'<line x1="{width - pad_r + 10}" y1="{ly}" x2="{width - pad_r + 28}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad_r + 32}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_series(runs, task):
    """Learning curve of ``task`` for each run: (global step, score) after the task was first seen."""
    return {r.label: [(step, score) for step, _, ev, score in r.curves if ev == task] for r in runs}


def curves_csv(runs):
    rows = [[r.label, step, trained, ev, repr(score)] for r in runs for step, trained, ev, score in r.curves]
    return to_csv(["run", "step", "training_task", "eval_task", "score"], rows)
