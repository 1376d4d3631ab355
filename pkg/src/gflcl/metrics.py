"""Task scorers and continual-learning aggregates (forgetting, average forgetting, mean rank)."""

from __future__ import annotations

import csv
import io
import math

import numpy as np


class EmptyEvaluationError(ValueError):
    pass


class UndefinedRateError(ValueError):
    pass


class UndefinedForgettingError(ValueError):
    pass


class ImmutableCellError(ValueError):
    pass


class IncompleteTableError(ValueError):
    pass


# -- task scorers ------------------------------------------------------------------------


def accuracy(predictions, references):
    """Percentage of exact matches; a ``None`` prediction (parse failure) counts as wrong."""
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not references:
        raise EmptyEvaluationError("accuracy of an empty evaluation set")
    hits = sum(p is not None and p == r for p, r in zip(predictions, references))
    return 100.0 * hits / len(references)


def edit_distance(hyp, ref):
    """Token-level Levenshtein distance with unit costs."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp, ref):
    if len(ref) == 0:
        raise UndefinedRateError("word error rate needs a non-empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(pairs):
    """Total edit distance over total reference length for (hyp, ref) pairs."""
    dist = n = 0
    for hyp, ref in pairs:
        if len(ref) == 0:
            raise UndefinedRateError("word error rate needs a non-empty reference")
        dist += edit_distance(hyp, ref)
        n += len(ref)
    if n == 0:
        raise EmptyEvaluationError("corpus WER over no samples")
    return dist / n


def extract_slot_types(tokens):
    """Slot types of complete ``B-x ... E-x`` spans, plus whether all markers were balanced."""
    types, open_type, balanced = [], None, True
    for tok in tokens:
        if tok.startswith("B-"):
            if open_type is not None:
                balanced = False
            open_type = tok[2:]
        elif tok.startswith("E-"):
            if open_type == tok[2:]:
                types.append(open_type)
            else:
                balanced = False
            open_type = None
    if open_type is not None:
        balanced = False
    return types, balanced


def _multiset_overlap(a, b):
    counts = {}
    for t in a:
        counts[t] = counts.get(t, 0) + 1
    tp = 0
    for t in b:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            tp += 1
    return tp


def slot_counts(hyp, ref):
    """(tp, fp, fn) of slot types for one sample."""
    ref_types, _ = extract_slot_types(ref)
    hyp_types, balanced = extract_slot_types(hyp)
    if not balanced:
        return 0, len(hyp_types), len(ref_types)
    tp = _multiset_overlap(hyp_types, ref_types)
    return tp, len(hyp_types) - tp, len(ref_types) - tp


def _f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    if p == 0.0 and r == 0.0:
        # nothing predicted and nothing expected is a perfect match
        return 100.0 if tp + fp + fn == 0 else 0.0
    return 100.0 * 2 * p * r / (p + r)


def slot_type_f1(hyp, ref):
    return _f1(*slot_counts(hyp, ref))


def corpus_slot_type_f1(pairs):
    tp = fp = fn = 0
    for hyp, ref in pairs:
        a, b, c = slot_counts(hyp, ref)
        tp, fp, fn = tp + a, fp + b, fn + c
    return _f1(tp, fp, fn)


# -- evaluation matrix --------------------------------------------------------------------------


class EvalMatrix:
    """Write-once lower-triangular score table; rows are training steps, columns tasks.

    Steps and tasks are 1-indexed: ``a(k, j)`` is task j's score after training through task k.
    A ``joint`` matrix (multi-task training) has a single full row instead.
    """

    def __init__(self, tasks, higher_is_better=None, joint=False):
        self.tasks = list(tasks)
        self.joint = joint
        hib = higher_is_better or {}
        self.higher_is_better = {t: hib.get(t, True) for t in self.tasks}
        self.cells = {}

    @property
    def size(self):
        return len(self.tasks)

    def record(self, k, j, score):
        if self.joint:
            if k != 1 or not 1 <= j <= self.size:
                raise IndexError(f"joint matrix has one row; got cell ({k}, {j})")
        elif not 1 <= j <= k <= self.size:
            raise IndexError(f"cell ({k}, {j}) outside the lower triangle of a {self.size}-task matrix")
        if (k, j) in self.cells:
            raise ImmutableCellError(f"cell ({k}, {j}) already written")
        score = float(score)
        if not math.isfinite(score):
            raise ValueError("scores must be finite")
        self.cells[(k, j)] = score
        return self

    def a(self, k, j):
        return self.cells[(k, j)]

    def get(self, k, j, default=None):
        return self.cells.get((k, j), default)

    def row(self, k):
        return [self.cells.get((k, j)) for j in range(1, self.size + 1)]

    def final_scores(self):
        k = max((k for k, _ in self.cells), default=0)
        return {t: self.cells.get((k, j + 1)) for j, t in enumerate(self.tasks)}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step"] + self.tasks)
        for k in range(1, (1 if self.joint else self.size) + 1):
            w.writerow([k] + ["" if v is None else repr(v) for v in self.row(k)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, higher_is_better=None):
        rows = list(csv.reader(io.StringIO(text)))
        m = cls(rows[0][1:], higher_is_better, joint=len(rows) == 2 and len(rows[0]) > 2
                and all(v != "" for v in rows[1][1:]))
        for r in rows[1:]:
            k = int(r[0])
            for j, v in enumerate(r[1:], 1):
                if v != "":
                    m.record(k, j, float(v))
        return m


def _oriented(matrix, j, value):
    return value if matrix.higher_is_better[matrix.tasks[j - 1]] else -value


def forgetting(matrix: EvalMatrix, j, k):
    """Best earlier score of task j minus its score after step k (negative = improvement)."""
    if j >= k:
        raise UndefinedForgettingError(f"forgetting of task {j} at step {k} needs j < k")
    past = [matrix.get(l, j) for l in range(1, k)]
    past = [v for v in past if v is not None]
    if not past or matrix.get(k, j) is None:
        raise UndefinedForgettingError(f"task {j} has no scores before step {k}")
    best = max(_oriented(matrix, j, v) for v in past)
    return best - _oriented(matrix, j, matrix.a(k, j))


def average_forgetting(matrix: EvalMatrix, k):
    if k < 2:
        raise UndefinedForgettingError("average forgetting needs at least two steps")
    return float(np.mean([forgetting(matrix, j, k) for j in range(1, k)]))


def task_forgetting(matrix: EvalMatrix):
    """Per-task forgetting after the last step; the last task has none."""
    k = matrix.size
    return {t: (forgetting(matrix, j, k) if j < k else None) for j, t in enumerate(matrix.tasks, 1)}


def mean_rank(scores, higher_is_better):
    """Average per-task rank of each method; tied methods all take the worst rank of their group.

    ``scores`` maps method -> {task: score}; ``higher_is_better`` maps task -> bool.
    """
    methods = list(scores)
    tasks = list(higher_is_better)
    for m in methods:
        missing = [t for t in tasks if scores[m].get(t) is None]
        if missing:
            raise IncompleteTableError(f"method {m!r} has no score for {missing}")
    ranks = {m: [] for m in methods}
    for t in tasks:
        sign = 1.0 if higher_is_better[t] else -1.0
        vals = {m: sign * scores[m][t] for m in methods}
        for m in methods:
            ranks[m].append(sum(vals[o] >= vals[m] for o in methods))
    return {m: float(np.mean(r)) for m, r in ranks.items()}
