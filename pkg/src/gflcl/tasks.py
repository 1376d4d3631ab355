"""Synthetic speech-like task families built from latent factors.

Each sample carries six latent factors (content, speaker, emotion and three intent slots).
Every factor owns a block of the input feature vector; the synthetic encoder reads each
block at the layer that factor is bound to.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

DATASET_FORMAT = "gflcl-dataset"
DATASET_VERSION = 1

KEYWORDS = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"]
GENERAL_WORDS = [
    "the", "a", "play", "set", "turn", "call", "find", "show", "me", "my",
    "please", "now", "some", "music", "weather", "alarm", "book", "table", "song", "light",
]
SLOT_VALUES = {
    "city": ["paris", "tokyo", "london", "berlin"],
    "time": ["noon", "tonight", "morning"],
    "artist": ["adele", "queen", "drake"],
}
SLOT_TYPES = list(SLOT_VALUES)
CONTENT_WORDS = KEYWORDS + GENERAL_WORDS + [w for vals in SLOT_VALUES.values() for w in vals]
SLOT_OF_WORD = {w: t for t, vals in SLOT_VALUES.items() for w in vals}
NON_SLOT_WORDS = KEYWORDS + GENERAL_WORDS

KS_LABELS = KEYWORDS + ["_silence_", "_unknown_"]
SPEAKER_LABELS = [f"<|speaker{i}|>" for i in range(1, 11)]
EMOTION_LABELS = ["happy", "sad", "neutral", "angry"]
INTENT_VALUES = {
    "action": ["activate", "deactivate", "increase", "decrease", "bring", "change"],
    "object": ["music", "lights", "volume", "heat", "lamp", "newspaper", "juice", "socks"],
    "location": ["none", "kitchen", "bedroom", "washroom"],
}

TEMPLATES = ("none", "short", "long")
FACTOR_NAMES = ("content", "speaker", "emotion", "action", "object", "location")
NUISANCE_BLOCKS = 6  # one utterance-level nuisance block per encoder layer
NUISANCE_WIDTH = 8


class BindingError(KeyError):
    pass


class TemplateError(ValueError):
    pass


class DegenerateProbeError(ValueError):
    pass


class FractionTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    name: str
    cardinality: int
    block: int  # width of the feature block carrying this factor

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError(f"factor {self.name} needs cardinality >= 2")


FACTORS = {
    "content": FactorSpec("content", len(CONTENT_WORDS), 16),
    "speaker": FactorSpec("speaker", 10, 8),
    "emotion": FactorSpec("emotion", 4, 8),
    "action": FactorSpec("action", 6, 8),
    "object": FactorSpec("object", 8, 8),
    "location": FactorSpec("location", 4, 8),
}

# lower layers hold speaker/paralinguistic information, the top layer holds content
DEFAULT_LAYER_BINDING = ("speaker", "emotion", "action", "object", "location", "content")


def feature_layout(factors=FACTORS):
    """Map factor name (and ``nuisance<i>``) -> slice of the input feature vector."""
    out, start = {}, 0
    for name in FACTOR_NAMES:
        b = factors[name].block
        out[name] = slice(start, start + b)
        start += b
    for i in range(NUISANCE_BLOCKS):
        out[f"nuisance{i}"] = slice(start, start + NUISANCE_WIDTH)
        start += NUISANCE_WIDTH
    return out


def feature_width(factors=FACTORS):
    return sum(f.block for f in factors.values()) + NUISANCE_BLOCKS * NUISANCE_WIDTH


@dataclass
class TaskSpec:
    task_id: str
    kind: str  # classification | generation
    factors: tuple
    metric: str  # accuracy | stf1 | wer
    subject: str = ""
    labels: list = field(default_factory=list)  # each label is a tuple of tokens
    epochs: int = 20
    sizes: dict = field(default_factory=lambda: {"train": 800, "validation": 200, "test": 200})

    def __post_init__(self):
        if self.kind not in ("classification", "generation"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.metric in ("wer", "stf1") and self.kind != "generation":
            raise ValueError(f"{self.task_id}: metric {self.metric} requires a generation task")
        if self.metric == "accuracy" and self.kind != "classification":
            raise ValueError(f"{self.task_id}: accuracy requires a classification task")
        if self.kind == "classification":
            if not self.labels:
                raise ValueError(f"{self.task_id}: classification task without labels")
            if len(set(self.labels)) != len(self.labels):
                raise ValueError(f"{self.task_id}: duplicate labels")

    @property
    def tag(self):
        return f"<|{self.task_id}|>"

    @property
    def higher_is_better(self):
        return self.metric != "wer"

    def label_string(self, label):
        return " ".join(label)

    def prompt_tokens(self, template):
        if template == "none":
            return []
        if template == "short":
            return [self.subject, "is"]
        if template == "long":
            return ["The", self.subject.lower(), "is"]
        raise TemplateError(f"unknown prompt template {template!r}")

    def token_inventory(self):
        """Every token this task can emit (besides tag/specials)."""
        toks = set()
        if self.kind == "classification":
            for lab in self.labels:
                toks.update(lab)
            for tmpl in ("short", "long"):
                toks.update(self.prompt_tokens(tmpl))
            toks.add(".")
        else:
            toks.update(CONTENT_WORDS)
            if self.metric == "stf1":
                for t in SLOT_TYPES:
                    toks.update((f"B-{t}", f"E-{t}"))
        return toks


def default_tasks(epoch_scale=1.0, sizes=None):
    """The six task families; epochs follow 40 (SID), 60 (ER), 20 (others) times ``epoch_scale``."""

    def ep(n):
        return max(1, int(round(n * epoch_scale)))

    ic_labels = [
        (a, o, l)
        for a in INTENT_VALUES["action"]
        for o in INTENT_VALUES["object"]
        for l in INTENT_VALUES["location"]
    ]
    tasks = [
        TaskSpec("KS", "classification", ("content",), "accuracy", "Keyword",
                 [(w,) for w in KS_LABELS], ep(20)),
        TaskSpec("SID", "classification", ("speaker",), "accuracy", "Speaker",
                 [(s,) for s in SPEAKER_LABELS], ep(40)),
        TaskSpec("ER", "classification", ("emotion",), "accuracy", "Emotion",
                 [(e,) for e in EMOTION_LABELS], ep(60)),
        TaskSpec("IC", "classification", ("action", "object", "location"), "accuracy", "Intent",
                 ic_labels, ep(20)),
        TaskSpec("SF", "generation", ("content",), "stf1", epochs=ep(20)),
        TaskSpec("ASR", "generation", ("content",), "wer", epochs=ep(20)),
    ]
    if sizes:
        for t in tasks:
            t.sizes = dict(sizes)
    return {t.task_id: t for t in tasks}


# -- samples ----------------------------------------------------------------------


@dataclass
class Sample:
    sample_id: str
    task_id: str
    split: str
    factors: dict
    features: np.ndarray
    target: list
    label: str | None = None

    def to_record(self):
        return {
            "id": self.sample_id,
            "task": self.task_id,
            "split": self.split,
            "factors": self.factors,
            "features": self.features.tolist(),
            "target": self.target,
            "label": self.label,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            rec["id"], rec["task"], rec["split"], rec["factors"],
            np.asarray(rec["features"], dtype=np.float64), list(rec["target"]), rec.get("label"),
        )


@dataclass
class DatasetSplit:
    task_id: str
    train: list
    validation: list
    test: list

    def splits(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def all_samples(self):
        return self.train + self.validation + self.test


class FactorCodebook:
    """Fixed random vectors for every factor value, shared by all tasks of a run."""

    def __init__(self, seed=0, scale=1.0, factors=FACTORS):
        rng = np.random.default_rng([int(seed), 7919])
        self.vectors = {}
        for name in FACTOR_NAMES:
            f = factors[name]
            v = rng.standard_normal((f.cardinality, f.block))
            self.vectors[name] = scale * v / np.sqrt(f.block)
        self.layout = feature_layout(factors)
        self.width = feature_width(factors)


def _task_key(task_id):
    return zlib.crc32(task_id.encode("utf-8"))


def render_target(spec: TaskSpec, factors: dict, template="short"):
    """Token sequence: task tag, optional prompt, label or transcript, end marker."""
    if template not in TEMPLATES:
        raise TemplateError(f"unknown prompt template {template!r}")
    toks = [spec.tag]
    if spec.kind == "classification":
        label = classification_label(spec, factors)
        toks += spec.prompt_tokens(template) + list(label)
        if template != "none":
            toks.append(".")
    elif spec.metric == "stf1":
        for w in factors["transcript"]:
            slot = SLOT_OF_WORD.get(w)
            toks += [f"B-{slot}", w, f"E-{slot}"] if slot else [w]
    else:
        toks += list(factors["transcript"])
    toks.append("<|eot|>")
    return toks


def classification_label(spec: TaskSpec, factors: dict):
    if spec.task_id == "KS":
        return (KS_LABELS[factors["keyword"]],)
    out = []
    for name in spec.factors:
        if name == "speaker":
            out.append(SPEAKER_LABELS[factors["speaker"]])
        elif name == "emotion":
            out.append(EMOTION_LABELS[factors["emotion"]])
        elif name in INTENT_VALUES:
            out.append(INTENT_VALUES[name][factors[name]])
        else:
            raise BindingError(f"{spec.task_id}: factor {name!r} has no label mapping")
    return tuple(out)


def _draw_factors(spec: TaskSpec, rng):
    f = {
        "speaker": int(rng.integers(10)),
        "emotion": int(rng.integers(4)),
        "action": int(rng.integers(6)),
        "object": int(rng.integers(8)),
        "location": int(rng.integers(4)),
    }
    if spec.task_id == "KS":
        k = int(rng.integers(len(KS_LABELS)))
        f["keyword"] = k
        if k < len(KEYWORDS):
            words = [KEYWORDS[k]] * 4
        elif KS_LABELS[k] == "_unknown_":
            words = [GENERAL_WORDS[int(rng.integers(len(GENERAL_WORDS)))]] * 4
        else:
            words = [None] * 4  # silence: no content in any frame
        f["transcript"] = words
        return f
    n = int(rng.integers(4, 9))
    if spec.metric == "wer":
        words = [CONTENT_WORDS[i] for i in rng.integers(len(CONTENT_WORDS), size=n)]
    else:
        words = [NON_SLOT_WORDS[i] for i in rng.integers(len(NON_SLOT_WORDS), size=n)]
    if spec.metric == "stf1":
        n_slots = int(rng.integers(1, 3))
        for pos in rng.choice(n, size=n_slots, replace=False):
            stype = SLOT_TYPES[int(rng.integers(len(SLOT_TYPES)))]
            vals = SLOT_VALUES[stype]
            words[int(pos)] = vals[int(rng.integers(len(vals)))]
    f["transcript"] = words
    return f


def compose_features(factors: dict, codebook: FactorCodebook, rng, noise=0.1, nuisance=0.7):
    """Frame features: factor codewords in their blocks, utterance-level nuisance, frame noise."""
    words = factors["transcript"]
    T = len(words)
    x = np.zeros((T, codebook.width))
    lay = codebook.layout
    for t, w in enumerate(words):
        if w is not None:
            x[t, lay["content"]] = codebook.vectors["content"][CONTENT_WORDS.index(w)]
    for name in ("speaker", "emotion", "action", "object", "location"):
        x[:, lay[name]] = codebook.vectors[name][factors[name]]
    for i in range(NUISANCE_BLOCKS):
        x[:, lay[f"nuisance{i}"]] = nuisance * rng.standard_normal(NUISANCE_WIDTH)
    x += noise * rng.standard_normal(x.shape)
    return x


def generate_task_data(spec: TaskSpec, codebook: FactorCodebook, seed=0, template="short",
                       noise=0.1, nuisance=0.7, binding=DEFAULT_LAYER_BINDING):
    """Train/validation/test samples for one task; a pure function of (spec, codebook, seed)."""
    for name in spec.factors:
        if name not in binding:
            raise BindingError(f"{spec.task_id}: factor {name!r} is not bound to any encoder layer")
    for split, n in spec.sizes.items():
        if n < 1:
            raise ValueError(f"{spec.task_id}: split {split} must hold at least one sample")
    key = _task_key(spec.task_id)
    out = {"train": [], "validation": [], "test": []}
    idx = 0
    for split in ("train", "validation", "test"):
        for _ in range(spec.sizes[split]):
            rng = np.random.default_rng([int(seed), key, idx])
            factors = _draw_factors(spec, rng)
            feats = compose_features(factors, codebook, rng, noise, nuisance)
            target = render_target(spec, factors, template)
            label = spec.label_string(classification_label(spec, factors)) if spec.kind == "classification" else None
            out[split].append(Sample(f"{spec.task_id}-{idx:06d}", spec.task_id, split, factors, feats, target, label))
            idx += 1
    return DatasetSplit(spec.task_id, out["train"], out["validation"], out["test"])


def retemplate(data: DatasetSplit, spec: TaskSpec, template):
    """Copy of ``data`` with classification targets re-rendered under another prompt template."""
    def conv(samples):
        return [
            Sample(s.sample_id, s.task_id, s.split, s.factors, s.features,
                   render_target(spec, s.factors, template), s.label)
            for s in samples
        ]
    return DatasetSplit(data.task_id, conv(data.train), conv(data.validation), conv(data.test))


def factor_value(sample: Sample, factor: str):
    if factor == "content":
        if "keyword" in sample.factors:
            return sample.factors["keyword"]
        raise BindingError("content is only a categorical factor for keyword samples")
    return sample.factors[factor]


# -- probing ----------------------------------------------------------------------------


def ridge_probe_accuracy(X, y, seed=0, ridge=1e-2, train_fraction=0.7):
    """Held-out accuracy of a closed-form ridge one-vs-rest linear probe."""
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateProbeError("probe needs at least two classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    ntr = int(round(train_fraction * len(y)))
    tr, te = perm[:ntr], perm[ntr:]
    mu, sd = X[tr].mean(0), X[tr].std(0) + 1e-8
    Z = (X - mu) / sd
    Z = np.hstack([Z, np.ones((len(Z), 1))])
    Y = (y[:, None] == classes[None, :]).astype(float)
    A = Z[tr].T @ Z[tr] + ridge * len(tr) * np.eye(Z.shape[1])
    Wp = np.linalg.solve(A, Z[tr].T @ Y[tr])
    pred = classes[np.argmax(Z[te] @ Wp, axis=1)]
    return float(np.mean(pred == y[te]))


def probe_layers(encoder, samples, factor, seed=0, labels=None):
    """Probe accuracy of ``factor`` from mean-pooled frames of every encoder layer."""
    if len(samples) < 200:
        raise ValueError("probing needs at least 200 samples")
    y = np.asarray(labels) if labels is not None else np.array([factor_value(s, factor) for s in samples])
    if np.unique(y).size < 2:
        raise DegenerateProbeError(f"factor {factor!r} takes a single value in this dataset")
    pooled = np.stack([encoder.encode(s.features).mean(axis=1) for s in samples])  # N x M x d
    return np.array([ridge_probe_accuracy(pooled[:, m], y, seed) for m in range(pooled.shape[1])])


def probe_matrix(encoder, codebook: FactorCodebook, seed=0, n=400, binding=DEFAULT_LAYER_BINDING):
    """Probe accuracies, one row per bound factor (in ``binding`` order) and one column per layer.

    Utterance factors are probed on SID-style samples (every sample draws all of them); content
    on keyword samples, where it is a single categorical value.
    """
    specs = default_tasks(sizes={"train": n, "validation": 1, "test": 1})
    pools = {
        "content": generate_task_data(specs["KS"], codebook, seed).train,
        "other": generate_task_data(specs["SID"], codebook, seed).train,
    }
    rows = [probe_layers(encoder, pools["content" if f == "content" else "other"], f, seed) for f in binding]
    return np.array(rows)


# -- subsetting -------------------------------------------------------------------------


def few_shot_subset(samples, fraction, seed=0):
    """Label-stratified subsample of ``fraction`` of ``samples`` (largest-remainder quotas)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return list(samples)
    total = int(round(fraction * len(samples)))
    if total < 1:
        raise FractionTooSmallError(f"fraction {fraction} of {len(samples)} samples is empty")
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.label if s.label is not None else "", []).append(i)
    keys = sorted(groups)
    exact = np.array([fraction * len(groups[k]) for k in keys])
    quota = np.floor(exact).astype(int)
    rest = total - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:rest]] += 1
    rng = np.random.default_rng([int(seed), 31337])
    chosen = []
    for k, q in zip(keys, quota):
        idx = groups[k]
        chosen.extend(idx[j] for j in rng.choice(len(idx), size=int(q), replace=False))
    return [samples[i] for i in sorted(chosen)]


# -- persistence ----------------------------------------------------------------------------


def save_dataset(path, data: DatasetSplit, seed, template):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "task": data.task_id,
                  "seed": seed, "template": template}
        fh.write(json.dumps(header) + "\n")
        for s in data.all_samples():
            fh.write(json.dumps(s.to_record()) + "\n")


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a dataset file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        splits = {"train": [], "validation": [], "test": []}
        for line in fh:
            s = Sample.from_record(json.loads(line))
            splits[s.split].append(s)
    return DatasetSplit(header["task"], splits["train"], splits["validation"], splits["test"]), header
