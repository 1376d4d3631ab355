"""Frozen synthetic encoder, gated fusion over its layers, and a small transformer decoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tasks import CONTENT_WORDS, DEFAULT_LAYER_BINDING, SLOT_TYPES, SPEAKER_LABELS, feature_layout, feature_width

PAD, SOT, EOT = "<|pad|>", "<|sot|>", "<|eot|>"
IGNORE = -100
CHECKPOINT_VERSION = 1


class UnknownTaskError(KeyError):
    pass


class AlreadyRegisteredError(ValueError):
    pass


class TagMismatchError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


# -- vocabulary ---------------------------------------------------------------------


class Vocabulary:
    """Dense token <-> index map with reserved regions for specials, tags and labels."""

    def __init__(self, tokens):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, tasks):
        """Specials, then one tag per task, then speaker/slot tokens, then sorted words."""
        specials = [PAD, SOT, EOT]
        tags = [t.tag for t in tasks]
        special_labels = list(SPEAKER_LABELS) + [f"{b}-{s}" for s in SLOT_TYPES for b in ("B", "E")]
        reserved = set(specials) | set(tags) | set(special_labels)
        words = set(CONTENT_WORDS)
        for t in tasks:
            words |= t.token_inventory()
        words -= reserved
        return cls(specials + tags + special_labels + sorted(words))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def encode(self, toks):
        try:
            return [self.index[t] for t in toks]
        except KeyError as e:
            raise VocabularyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    @property
    def pad(self):
        return self.index[PAD]

    @property
    def sot(self):
        return self.index[SOT]

    @property
    def eot(self):
        return self.index[EOT]

    def tag_ids(self):
        return {t: i for t, i in self.index.items() if t.startswith("<|") and t.endswith("|>")
                and t not in (PAD, SOT, EOT) and not t.startswith("<|speaker")}


# -- frozen encoder ---------------------------------------------------------------------


@dataclass
class EncoderConfig:
    d_in: int = feature_width()
    width: int = 32
    binding: tuple = DEFAULT_LAYER_BINDING
    attenuation: float = 0.7
    strength: float = 1.0
    recurrent_gain: float = 1.0
    seed: int = 0

    @property
    def layers(self):
        return len(self.binding)


class SyntheticEncoder:
    """Stack of frozen random layers; layer i injects the feature block of factor binding[i].

    h_i = attenuation * tanh(h_{i-1} A_i) + strength * x[:, block_i] B_i + x[:, nuisance_i] C_i
    """

    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        c = self.config
        rng = np.random.default_rng([int(c.seed), 4242])
        layout = feature_layout()
        self.blocks = [layout[name] for name in c.binding]
        self.nuisance = [layout[f"nuisance{i}"] for i in range(len(c.binding))]
        self.recurrent = []
        self.inject = []
        self.mix = []
        for blk, nb in zip(self.blocks, self.nuisance):
            b = blk.stop - blk.start
            A = rng.standard_normal((c.width, c.width)) * c.recurrent_gain / np.sqrt(c.width)
            B = rng.standard_normal((b, c.width)) * 2.0 / np.sqrt(b)
            C = rng.standard_normal((nb.stop - nb.start, c.width)) * 2.0 / np.sqrt(nb.stop - nb.start)
            for a in (A, B, C):
                a.setflags(write=False)
            self.recurrent.append(A)
            self.inject.append(B)
            self.mix.append(C)

    @property
    def layers(self):
        return self.config.layers

    @property
    def width(self):
        return self.config.width

    def encode(self, features):
        """All per-layer hidden states, shape (M, T, width). Deterministic, gradient-free."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.d_in or x.shape[0] < 1:
            raise nx.DimensionError(f"encoder expects (T>=1, {self.config.d_in}) features, got {x.shape}")
        c = self.config
        h = np.zeros((x.shape[0], c.width))
        out = np.empty((c.layers, x.shape[0], c.width))
        for i, (blk, nb, A, B, C) in enumerate(zip(self.blocks, self.nuisance, self.recurrent, self.inject, self.mix)):
            h = c.attenuation * np.tanh(h @ A) + c.strength * (x[:, blk] @ B) + x[:, nb] @ C
            out[i] = h
        return out

    def checksum(self):
        h = hashlib.sha256()
        for a in self.recurrent + self.inject + self.mix:
            h.update(a.tobytes())
        return h.hexdigest()


def normalize_stack(states, epsilon=1e-5):
    """Layer-normalise every layer (unit gain, zero bias), keeping the (M, T, d) layout."""
    states = np.asarray(states, dtype=np.float64)
    d = states.shape[-1]
    return nx.layer_norm(Tensor(states), np.ones(d), np.zeros(d), epsilon).data


# -- gate ---------------------------------------------------------------------------------


class GateMatrix:
    """Per-task rows of layer weights; a tempered softmax of a row gives that task's mixture."""

    def __init__(self, layers, temperature=0.0005, params: nx.ParameterSet | None = None, name="gate.W"):
        nx._check_temperature(temperature)
        self.layers = layers
        self.temperature = temperature
        self.name = name
        self.rows = {}
        self.params = params if params is not None else nx.ParameterSet()
        if name not in self.params:
            self.params.add(name, np.zeros((0, layers)))

    @property
    def W(self):
        return self.params[self.name]

    def register_task(self, task_id):
        if task_id in self.rows:
            raise AlreadyRegisteredError(f"task {task_id!r} already has gate row {self.rows[task_id]}")
        W = self.W
        W.data = np.vstack([W.data, np.zeros((1, self.layers))])
        self.rows[task_id] = W.data.shape[0] - 1
        return self.rows[task_id]

    def row(self, task_id):
        try:
            return self.rows[task_id]
        except KeyError:
            raise UnknownTaskError(f"task {task_id!r} has no gate row") from None

    def weights(self, task_id):
        """Gate distribution over layers for one task (a Tensor, differentiable w.r.t. W)."""
        return nx.softmax_with_temperature(self.W[self.row(task_id)], self.temperature)

    def batch_weights(self, task_ids):
        rows = np.array([self.row(t) for t in task_ids])
        return nx.softmax_with_temperature(nx.take(self.W, rows), self.temperature)


@dataclass
class FusedRepresentation:
    frames: Tensor  # (T, d)
    task_id: str


def fuse(stack, gate: GateMatrix, task_id):
    """Gate-weighted sum over the layer axis of a normalised (M, T, d) stack."""
    stack = np.asarray(stack)
    g = gate.weights(task_id)  # (M,)
    M, T, d = stack.shape
    flat = Tensor(stack.reshape(M, T * d).T)  # (T*d, M)
    out = nx.matmul(flat, nx.reshape(g, (M, 1)))
    return FusedRepresentation(nx.reshape(out, (T, d)), task_id)


def fuse_batch(stacks, gate: GateMatrix, task_ids):
    """Batched fuse: stacks (B, M, T, d) with one task per row -> (B, T, d)."""
    B, M, T, d = stacks.shape
    g = gate.batch_weights(task_ids)  # (B, M)
    flat = Tensor(stacks.reshape(B, M, T * d).transpose(0, 2, 1))  # (B, T*d, M)
    out = nx.matmul(flat, nx.reshape(g, (B, M, 1)))
    return nx.reshape(out, (B, T, d))


# -- decoder ----------------------------------------------------------------------------------


@dataclass
class DecoderConfig:
    width: int = 64
    heads: int = 4
    blocks: int = 2
    ff_mult: int = 4
    max_len: int = 32
    max_frames: int = 16
    seed: int = 0


def init_decoder_params(params: nx.ParameterSet, cfg: DecoderConfig, vocab_size, memory_width):
    rng = np.random.default_rng([int(cfg.seed), 1234])
    d = cfg.width

    def dense(name, fan_in, fan_out, gain=1.0):
        params.add(f"{name}.w", rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in))
        params.add(f"{name}.b", np.zeros(fan_out))

    def norm(name, n):
        params.add(f"{name}.g", np.ones(n))
        params.add(f"{name}.b", np.zeros(n))

    resid = 1.0 / np.sqrt(2 * cfg.blocks)
    params.add("dec.embed", rng.standard_normal((vocab_size, d)) * 0.3)
    params.add("dec.pos", rng.standard_normal((cfg.max_len, d)) * 0.1)
    params.add("dec.mem_pos", rng.standard_normal((cfg.max_frames, memory_width)) * 0.1)
    for i in range(cfg.blocks):
        p = f"dec.{i}"
        norm(f"{p}.ln1", d)
        for n in ("q", "k", "v"):
            dense(f"{p}.self.{n}", d, d)
        dense(f"{p}.self.o", d, d, resid)
        norm(f"{p}.ln2", d)
        dense(f"{p}.cross.q", d, d)
        dense(f"{p}.cross.k", memory_width, d)
        dense(f"{p}.cross.v", memory_width, d)
        dense(f"{p}.cross.o", d, d, resid)
        norm(f"{p}.ln3", d)
        dense(f"{p}.ff1", d, cfg.ff_mult * d)
        dense(f"{p}.ff2", cfg.ff_mult * d, d, resid)
    norm("dec.lnf", d)
    dense("dec.out", d, vocab_size, 0.5)


def _split_heads(x, B, L, H, dh):
    return nx.transpose(nx.reshape(x, (B, L, H, dh)), (0, 2, 1, 3))


def _attention(P, prefix, xq, xkv, mask_add, heads):
    B, L, d = xq.shape
    S = xkv.shape[1]
    dh = d // heads
    q = _split_heads(nx.affine(xq, P[f"{prefix}.q.w"], P[f"{prefix}.q.b"]), B, L, heads, dh)
    k = _split_heads(nx.affine(xkv, P[f"{prefix}.k.w"], P[f"{prefix}.k.b"]), B, S, heads, dh)
    v = _split_heads(nx.affine(xkv, P[f"{prefix}.v.w"], P[f"{prefix}.v.b"]), B, S, heads, dh)
    scores = nx.add(nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)), mask_add)
    att = nx.softmax(scores)
    o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    return nx.affine(o, P[f"{prefix}.o.w"], P[f"{prefix}.o.b"])


def _ln(P, name, x):
    return nx.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def decoder_logits(P: nx.ParameterSet, cfg: DecoderConfig, memory, frame_mask, inputs):
    """Next-token logits (B, L, V) for decoder ``inputs`` (B, L) attending over ``memory`` (B, T, dm)."""
    memory = nx.as_tensor(memory)
    inputs = np.asarray(inputs)
    B, L = inputs.shape
    T = memory.shape[1]
    if L > cfg.max_len or T > cfg.max_frames:
        raise nx.DimensionError(f"sequence {L} / frames {T} exceed decoder limits")
    x = nx.add(nx.take(P["dec.embed"], inputs), nx.take(P["dec.pos"], slice(0, L)))
    mem = nx.add(memory, nx.take(P["dec.mem_pos"], slice(0, T)))
    causal = np.triu(np.full((L, L), -1e9), k=1)[None, None]
    if frame_mask is None:
        cross_mask = np.zeros((B, 1, 1, T))
    else:
        cross_mask = np.where(np.asarray(frame_mask, bool), 0.0, -1e9)[:, None, None, :]
    for i in range(cfg.blocks):
        p = f"dec.{i}"
        x = nx.add(x, _self_attention(P, p, x, causal, cfg.heads))
        x = nx.add(x, _attention(P, f"{p}.cross", _ln(P, f"{p}.ln2", x), mem, cross_mask, cfg.heads))
        h = _ln(P, f"{p}.ln3", x)
        h = nx.affine(nx.gelu(nx.affine(h, P[f"{p}.ff1.w"], P[f"{p}.ff1.b"])), P[f"{p}.ff2.w"], P[f"{p}.ff2.b"])
        x = nx.add(x, h)
    x = _ln(P, "dec.lnf", x)
    return nx.affine(x, P["dec.out.w"], P["dec.out.b"])


def _self_attention(P, p, x, causal, heads):
    h = _ln(P, f"{p}.ln1", x)
    return _attention(P, f"{p}.self", h, h, causal, heads)


def teacher_forcing(vocab: Vocabulary, targets):
    """Decoder inputs/labels for a list of target token sequences (tag first, end marker last).

    inputs = [sot, tag, w1..wn], labels = [ignored, w1..wn, eot]; the tag is always given.
    """
    L = max(len(t) for t in targets)
    inputs = np.full((len(targets), L), vocab.pad, dtype=np.int64)
    labels = np.full((len(targets), L), IGNORE, dtype=np.int64)
    for b, toks in enumerate(targets):
        ids = vocab.encode(toks)
        inputs[b, 0] = vocab.sot
        inputs[b, 1:len(ids)] = ids[:-1]
        labels[b, 1:len(ids)] = ids[1:]
    return inputs, labels


# -- batching ----------------------------------------------------------------------------------


class StackCache:
    """Normalised encoder stacks per sample id; the encoder is frozen so these never change."""

    def __init__(self, encoder: SyntheticEncoder):
        self.encoder = encoder
        self._cache = {}

    def __call__(self, sample):
        st = self._cache.get(sample.sample_id)
        if st is None:
            st = normalize_stack(self.encoder.encode(sample.features))
            self._cache[sample.sample_id] = st
        return st

    def __len__(self):
        return len(self._cache)


@dataclass
class Batch:
    stacks: np.ndarray  # (B, M, T, d)
    frame_mask: np.ndarray  # (B, T) bool
    inputs: np.ndarray  # (B, L)
    labels: np.ndarray  # (B, L), IGNORE where no loss
    task_ids: list
    samples: list

    def __len__(self):
        return len(self.samples)


def pad_stacks(stacks):
    M, _, d = stacks[0].shape
    T = max(s.shape[1] for s in stacks)
    out = np.zeros((len(stacks), M, T, d))
    mask = np.zeros((len(stacks), T), dtype=bool)
    for b, s in enumerate(stacks):
        out[b, :, : s.shape[1]] = s
        mask[b, : s.shape[1]] = True
    return out, mask


def collate(samples, cache: StackCache, vocab: Vocabulary):
    stacks, mask = pad_stacks([cache(s) for s in samples])
    inputs, labels = teacher_forcing(vocab, [s.target for s in samples])
    return Batch(stacks, mask, inputs, labels, [s.task_id for s in samples], list(samples))


# -- the full model ------------------------------------------------------------------------------


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    use_gate: bool = True
    temperature: float = 0.0005


class ContinualModel:
    """Frozen encoder + (optional) gated fusion + trainable decoder sharing one ParameterSet.

    Without a gate the decoder reads the normalised top encoder layer.
    """

    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None):
        self.vocab = vocab
        self.config = config or ModelConfig()
        self.encoder = SyntheticEncoder(self.config.encoder)
        self.params = nx.ParameterSet()
        self.gate = (
            GateMatrix(self.encoder.layers, self.config.temperature, self.params)
            if self.config.use_gate else None
        )
        init_decoder_params(self.params, self.config.decoder, len(vocab), self.encoder.width)

    def register_task(self, task_id):
        if task_id not in self.vocab.tag_ids() and f"<|{task_id}|>" not in self.vocab:
            raise VocabularyError(f"no tag for task {task_id!r}")
        if self.gate is not None and task_id not in self.gate.rows:
            self.gate.register_task(task_id)

    def memory(self, stacks, task_ids):
        """Representation the decoder attends to, (B, T, d_enc)."""
        if self.gate is None:
            return Tensor(stacks[:, -1])
        return fuse_batch(stacks, self.gate, task_ids)

    def logits(self, stacks, frame_mask, task_ids, inputs):
        return decoder_logits(self.params, self.config.decoder, self.memory(stacks, task_ids), frame_mask, inputs)

    def decoder_params(self):
        return [n for n in self.params if n.startswith("dec.")]

    def clone(self):
        other = ContinualModel.__new__(ContinualModel)
        other.vocab = self.vocab
        other.config = self.config
        other.encoder = self.encoder
        other.params = nx.ParameterSet(self.params.snapshot())
        other.params.frozen = set(self.params.frozen)
        other.gate = None
        if self.gate is not None:
            other.gate = GateMatrix(self.gate.layers, self.gate.temperature, other.params)
            other.gate.rows = dict(self.gate.rows)
        return other

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def decoder_forward(model: ContinualModel, fused: FusedRepresentation, target_tokens):
    """Teacher-forced logits and loss for one fused sample (tag-checked)."""
    if not target_tokens or target_tokens[0] != f"<|{fused.task_id}|>":
        raise TagMismatchError(
            f"target starts with {target_tokens[:1]}, expected tag of task {fused.task_id!r}"
        )
    inputs, labels = teacher_forcing(model.vocab, [target_tokens])
    mem = nx.reshape(fused.frames, (1,) + fused.frames.shape)
    logits = decoder_logits(model.params, model.config.decoder, mem, None, inputs)
    return logits, nx.cross_entropy(logits, labels, IGNORE)


# -- checkpoints ------------------------------------------------------------------------------------


def save_checkpoint(path, model: ContinualModel, extra=None):
    meta = {
        "format": "gflcl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "vocab": model.vocab.tokens,
        "encoder": asdict(model.config.encoder),
        "decoder": asdict(model.config.decoder),
        "use_gate": model.config.use_gate,
        "temperature": model.config.temperature,
        "gate_rows": model.gate.rows if model.gate is not None else None,
        "frozen": sorted(model.params.frozen),
        "extra": extra or {},
    }
    arrays = {f"p:{n}": p.data for n, p in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "gflcl-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint")
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
    enc = meta["encoder"]
    enc["binding"] = tuple(enc["binding"])
    cfg = ModelConfig(EncoderConfig(**enc), DecoderConfig(**meta["decoder"]), meta["use_gate"], meta["temperature"])
    model = ContinualModel(Vocabulary(meta["vocab"]), cfg)
    if model.gate is not None:
        model.gate.rows = dict(meta["gate_rows"])
        model.params["gate.W"].data = np.zeros(arrays["gate.W"].shape)
    model.params.load(arrays)
    model.params.frozen = set(meta["frozen"])
    return model, meta
