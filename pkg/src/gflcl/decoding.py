"""Prompt templates, greedy decoding (optionally trie-constrained) and label parsing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import numerics as nx
from .model import EOT, ContinualModel, FusedRepresentation, StackCache, Vocabulary, decoder_logits, pad_stacks
from .tasks import TEMPLATES, TaskSpec, TemplateError


class UnsupportedTaskError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    subject: str

    def __post_init__(self):
        if self.template_id not in TEMPLATES:
            raise TemplateError(f"unknown prompt template {self.template_id!r}")

    def tokens(self):
        if self.template_id == "none":
            return []
        if self.template_id == "short":
            return [self.subject, "is"]
        return ["The", self.subject.lower(), "is"]


@dataclass
class DecodeConfig:
    constrained: bool = True
    max_len: int = 24
    template: str = "short"


@dataclass
class TrieNode:
    children: dict = field(default_factory=dict)
    label: str | None = None  # set on leaves


class ConstraintTrie:
    """Token trie of every legal output after the task tag (prompt + label + end marker)."""

    def __init__(self, task_id, paths):
        self.task_id = task_id
        self.root = TrieNode()
        self.n_leaves = 0
        self.depth = 0
        for ids, label in paths:
            node = self.root
            for tok in ids:
                node = node.children.setdefault(tok, TrieNode())
            if node.label is not None:
                raise ValueError(f"two labels render to the same output: {node.label!r}, {label!r}")
            node.label = label
            self.n_leaves += 1
            self.depth = max(self.depth, len(ids))

    def leaves(self):
        out, stack = [], [(self.root, [])]
        while stack:
            node, path = stack.pop()
            if not node.children:
                out.append((path, node.label))
            for tok, child in node.children.items():
                stack.append((child, path + [tok]))
        return sorted(out)


def label_tokens(task: TaskSpec, label, template):
    toks = task.prompt_tokens(template) + list(label)
    if template != "none":
        toks.append(".")
    return toks


def build_trie(task: TaskSpec, template, vocab: Vocabulary):
    if task.kind != "classification":
        raise UnsupportedTaskError(f"{task.task_id} is a generation task; it always decodes unconstrained")
    paths = [
        (vocab.encode(label_tokens(task, lab, template) + [EOT]), task.label_string(lab))
        for lab in task.labels
    ]
    return ConstraintTrie(task.task_id, paths)


def parse_label(tokens, task: TaskSpec, template):
    """Label string if ``tokens`` is exactly tag? + prompt + legal label (+ '.'), else ``None``."""
    toks = list(tokens)
    if toks and toks[0] == task.tag:
        toks = toks[1:]
    if toks and toks[-1] == EOT:
        toks = toks[:-1]
    prompt = task.prompt_tokens(template)
    if toks[: len(prompt)] != prompt:
        return None
    toks = toks[len(prompt):]
    if template != "none":
        if not toks or toks[-1] != ".":
            return None
        toks = toks[:-1]
    label = tuple(toks)
    if label not in set(task.labels):
        return None
    return task.label_string(label)


@dataclass
class DecodeResult:
    tokens: list  # token strings after the tag, without the end marker
    finished: bool  # False when max_len cut the output


def greedy_decode(model: ContinualModel, stacks, frame_mask, task_id, trie: ConstraintTrie | None = None,
                  max_len=24):
    """Width-1 greedy decoding of a batch sharing one task; the tag is always forced."""
    vocab = model.vocab
    B = stacks.shape[0]
    if trie is not None and trie.task_id != task_id:
        raise ValueError(f"trie built for {trie.task_id}, decoding {task_id}")
    if trie is not None:
        max_len = max(max_len, trie.depth)
    tag = vocab.index[f"<|{task_id}|>"]
    seqs = np.tile(np.array([[vocab.sot, tag]], dtype=np.int64), (B, 1))
    nodes = [trie.root] * B if trie is not None else None
    done = np.zeros(B, dtype=bool)
    finished = np.zeros(B, dtype=bool)
    with nx.no_grad():
        memory = model.memory(stacks, [task_id] * B).data
        for _ in range(max_len):
            nxt = np.full(B, vocab.pad, dtype=np.int64)
            need = ~done
            if trie is not None:
                for b in np.flatnonzero(~done):
                    kids = nodes[b].children
                    if len(kids) == 1:
                        nxt[b] = next(iter(kids))
                        need[b] = False
            rows = np.flatnonzero(need)
            if rows.size:
                logits = decoder_logits(model.params, model.config.decoder, memory[rows],
                                        frame_mask[rows] if frame_mask is not None else None, seqs[rows]).data[:, -1]
                if not np.all(np.isfinite(logits)):
                    raise nx.NumericError("non-finite logits during decoding")
                if trie is not None:
                    masked = np.full_like(logits, -np.inf)
                    for i, b in enumerate(rows):
                        legal = list(nodes[b].children)
                        masked[i, legal] = logits[i, legal]
                    logits = masked
                nxt[rows] = np.argmax(logits, axis=-1)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            for b in np.flatnonzero(~done):
                if trie is not None:
                    nodes[b] = nodes[b].children[int(nxt[b])]
                    if not nodes[b].children:
                        done[b] = finished[b] = True
                elif nxt[b] == vocab.eot:
                    done[b] = finished[b] = True
            if done.all():
                break
    out = []
    for b in range(B):
        ids = [int(i) for i in seqs[b, 2:]]
        if finished[b]:
            ids = ids[: ids.index(vocab.eot)] if vocab.eot in ids else ids
        else:
            ids = [i for i in ids if i != vocab.pad]
        out.append(DecodeResult(vocab.decode(ids), bool(finished[b])))
    return out


def _single(fused: FusedRepresentation):
    mem = fused.frames.data[None]
    return mem


def constrained_greedy_decode(model: ContinualModel, fused: FusedRepresentation, trie: ConstraintTrie,
                              config: DecodeConfig | None = None):
    """Constrained decode of one fused sample; returns the output tokens after the tag."""
    config = config or DecodeConfig()
    return _decode_fused(model, fused, trie, config.max_len)


def unconstrained_decode(model: ContinualModel, fused: FusedRepresentation, config: DecodeConfig | None = None):
    config = config or DecodeConfig(constrained=False)
    return _decode_fused(model, fused, None, config.max_len)


def _decode_fused(model, fused, trie, max_len):
    # bypass the gate: ``fused`` is already the representation to attend to
    vocab = model.vocab
    mem = _single(fused)
    tag = vocab.index[f"<|{fused.task_id}|>"]
    seq = [vocab.sot, tag]
    node = trie.root if trie is not None else None
    with nx.no_grad():
        for _ in range(max(max_len, trie.depth if trie else 0)):
            if node is not None and len(node.children) == 1:
                tok = next(iter(node.children))
            else:
                logits = decoder_logits(model.params, model.config.decoder, mem, None, np.array([seq])).data[0, -1]
                if not np.all(np.isfinite(logits)):
                    raise nx.NumericError("non-finite logits during decoding")
                if node is not None:
                    legal = list(node.children)
                    tok = legal[int(np.argmax(logits[legal]))]
                else:
                    tok = int(np.argmax(logits))
            seq.append(tok)
            if node is not None:
                node = node.children[tok]
                if not node.children:
                    return DecodeResult(vocab.decode(seq[2:-1]), True)
            elif tok == vocab.eot:
                return DecodeResult(vocab.decode(seq[2:-1]), True)
    return DecodeResult(vocab.decode(seq[2:]), False)


# -- evaluation -------------------------------------------------------------------------------


@dataclass
class EvalRecord:
    sample_id: str
    task_id: str
    raw: str
    parsed: str | None
    correct: bool | None  # None for generation tasks (scored at corpus level)
    finished: bool = True

    def to_json(self):
        return json.dumps(self.__dict__)


def evaluate(model: ContinualModel, task: TaskSpec, samples, cache: StackCache, template="short",
             constrained=True, batch_size=256, max_len=24, trie=None):
    """Decode ``samples`` and score them with the task's metric. Returns (score, records)."""
    if not samples:
        raise metrics.EmptyEvaluationError(f"no samples to evaluate for {task.task_id}")
    use_trie = constrained and task.kind == "classification"
    if use_trie and trie is None:
        trie = build_trie(task, template, model.vocab)
    records, hyps = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        stacks, mask = pad_stacks([cache(s) for s in chunk])
        hyps.extend(greedy_decode(model, stacks, mask, task.task_id, trie if use_trie else None, max_len))
    if task.kind == "classification":
        preds = []
        for s, h in zip(samples, hyps):
            p = parse_label(h.tokens, task, template)
            preds.append(p)
            records.append(EvalRecord(s.sample_id, task.task_id, " ".join(h.tokens), p, p == s.label, h.finished))
        score = metrics.accuracy(preds, [s.label for s in samples])
    else:
        pairs = []
        for s, h in zip(samples, hyps):
            ref = s.target[1:-1]
            pairs.append((h.tokens, ref))
            records.append(EvalRecord(s.sample_id, task.task_id, " ".join(h.tokens), " ".join(h.tokens), None, h.finished))
        if task.metric == "wer":
            score = 100.0 * metrics.corpus_wer(pairs)
        else:
            score = metrics.corpus_slot_type_f1(pairs)
    return score, records


def parse_failures(records):
    return sum(r.parsed is None for r in records)
