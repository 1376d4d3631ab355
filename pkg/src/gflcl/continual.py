"""Sequential training harness: FT, Replay, LwF, DERPP, MTL, GFL_S and GFL_D."""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import decoding, metrics
from . import numerics as nx
from .model import (IGNORE, ContinualModel, ModelConfig, StackCache, Vocabulary, collate, save_checkpoint)
from .tasks import TaskSpec, few_shot_subset

log = logging.getLogger(__name__)

METHODS = ("ft", "replay", "lwf", "derpp", "mtl", "gfl_s", "gfl_d")
GATED = ("gfl_s", "gfl_d")


class OrderError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class DataError(ValueError):
    pass


class MissingOldModelError(RuntimeError):
    pass


class StageFailure(RuntimeError):
    pass


@dataclass
class MethodConfig:
    method: str = "gfl_d"
    buffer_capacity: int = 1000
    replay_ratio: float = 1.0  # replayed batch size relative to the current batch
    lwf_lambda: float = 1.0
    lwf_temperature: float = 2.0
    derpp_alpha: float = 0.5
    derpp_beta: float = 0.5
    gfl_temperature: float = 0.0005
    gfl_replay: bool = True
    stage1_fraction: float = 1.0
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    epoch_scale: float = 1.0
    patience: int = 1000
    eval_every: int = 50  # validation cadence (steps) for early stopping
    curve_every: int = 50  # learning-curve cadence (steps); 0 disables curves
    restore_best: bool = True
    template: str = "short"
    constrained: bool = True
    mtl_epochs: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.buffer_capacity < 1 or self.replay_ratio <= 0 or self.batch_size < 1:
            raise ConfigurationError("buffer capacity, replay ratio and batch size must be positive")
        if not 0.0 < self.stage1_fraction <= 1.0:
            raise ConfigurationError("stage-1 fraction must lie in (0, 1]")
        if self.patience < 1 or self.eval_every < 1 or self.curve_every < 0:
            raise ConfigurationError("patience and eval cadence must be positive")

    @property
    def uses_buffer(self):
        return self.method in ("replay", "derpp") or (self.method in GATED and self.gfl_replay)

    @property
    def gated(self):
        return self.method in GATED


# -- replay buffer -------------------------------------------------------------------------------


@dataclass
class ReplayItem:
    sample: object
    task_id: str
    logits: np.ndarray | None = None


class ReplayBuffer:
    """Capacity-bounded store, re-partitioned equally across seen tasks at every task boundary."""

    def __init__(self, capacity=1000, policy="balanced"):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        if policy != "balanced":
            raise ConfigurationError(f"unknown buffer policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.per_task = {}  # task id -> list of ReplayItem, in insertion order
        self.accesses = 0

    @property
    def items(self):
        return [it for items in self.per_task.values() for it in items]

    def __len__(self):
        return sum(len(v) for v in self.per_task.values())

    def counts(self):
        return {t: len(v) for t, v in self.per_task.items()}

    def quotas(self, task_ids):
        k = len(task_ids)
        base, extra = divmod(self.capacity, k)
        return {t: base + (i < extra) for i, t in enumerate(task_ids)}

    def sample(self, n, rng):
        items = self.items
        self.accesses += 1
        if not items:
            return []
        idx = rng.choice(len(items), size=min(n, len(items)), replace=False)
        return [items[i] for i in sorted(idx)]


def buffer_insert(buffer: ReplayBuffer, task_id, train_samples, seed=0, logits_fn=None):
    """Add a finished task's quota and shrink earlier tasks to the new equal share."""
    tasks = list(buffer.per_task) + ([task_id] if task_id not in buffer.per_task else [])
    quotas = buffer.quotas(tasks)
    for t in buffer.per_task:
        buffer.per_task[t] = buffer.per_task[t][: quotas[t]]
    rng = np.random.default_rng([int(seed), zlib.crc32(task_id.encode()), 99])
    q = min(quotas[task_id], len(train_samples))
    chosen = [train_samples[i] for i in rng.choice(len(train_samples), size=q, replace=False)]
    logits = logits_fn(chosen) if logits_fn is not None else [None] * len(chosen)
    buffer.per_task[task_id] = [ReplayItem(s, task_id, lg) for s, lg in zip(chosen, logits)]
    assert len(buffer) <= buffer.capacity
    return buffer


# -- losses --------------------------------------------------------------------------------------


def _ce(model, batch):
    logits = model.logits(batch.stacks, batch.frame_mask, batch.task_ids, batch.inputs)
    return logits, nx.cross_entropy(logits, batch.labels, IGNORE)


def _masked_mse(logits, stored, labels):
    mask = (labels != IGNORE).astype(float)[..., None]
    n = mask.sum() * logits.shape[-1]
    diff = nx.add(logits, -stored)
    return nx.scale(nx.sum_(nx.mul(nx.square(diff), mask)), 1.0 / max(n, 1.0))


def _distill_kl(new_logits, old_logits, labels, temperature):
    """KL(old || new) of temperature-softened distributions, times temperature**2."""
    mask = (labels != IGNORE).astype(float)[..., None]
    n = max(mask.sum(), 1.0)
    z = old_logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    logq = nx.log_softmax(new_logits, temperature)
    const = float((p * logp * mask).sum())
    cross = nx.sum_(nx.mul(logq, p * mask))
    kl = nx.scale(nx.add(nx.neg(cross), const), 1.0 / n)
    return nx.scale(kl, temperature**2)


def _stored_logits_batch(items, L, V):
    out = np.zeros((len(items), L, V))
    for b, it in enumerate(items):
        out[b, : it.logits.shape[0]] = it.logits
    return out


def method_loss(cfg: MethodConfig, batch, model: ContinualModel, buffer: ReplayBuffer | None = None,
                old_model: ContinualModel | None = None, rng=None, cache=None, first_task=False):
    """Training loss of ``cfg.method`` on a current-task batch (plus replay/distillation terms)."""
    method = cfg.method
    if method in ("ft", "mtl") or (method in GATED and not cfg.gfl_replay):
        return _ce(model, batch)[1]
    if method == "lwf":
        logits, loss = _ce(model, batch)
        if first_task:
            return loss
        if old_model is None:
            raise MissingOldModelError("LwF needs a snapshot of the model from before this task")
        with nx.no_grad():
            old = old_model.logits(batch.stacks, batch.frame_mask, batch.task_ids, batch.inputs).data
        return nx.add(loss, nx.scale(_distill_kl(logits, old, batch.labels, cfg.lwf_temperature), cfg.lwf_lambda))
    n_replay = max(1, int(round(cfg.replay_ratio * len(batch))))
    items = buffer.sample(n_replay, rng) if buffer is not None and len(buffer) else []
    if not items:
        return _ce(model, batch)[1]
    rb = collate([it.sample for it in items], cache, model.vocab)
    if method == "derpp":
        loss = _ce(model, batch)[1]
        rlogits, rce = _ce(model, rb)
        stored = _stored_logits_batch(items, rb.inputs.shape[1], rlogits.shape[-1])
        mse = _masked_mse(rlogits, stored, rb.labels)
        return nx.add(loss, nx.add(nx.scale(mse, cfg.derpp_alpha), nx.scale(rce, cfg.derpp_beta)))
    # replay and gated methods: CE(current) + CE(replayed)
    return nx.add(_ce(model, batch)[1], _ce(model, rb)[1])


def overfit_batch(model: ContinualModel, batch, steps=200, lr=1e-3):
    """Debug mode: repeat AdamW steps on one batch (plain CE). Returns the loss before each step."""
    opt = nx.OptimizerState(lr=lr, weight_decay=0.0, warmup_fraction=0.0, total_steps=steps)
    losses = []
    for _ in range(steps):
        model.params.zero_grad()
        _, loss = _ce(model, batch)
        losses.append(loss.item())
        loss.backward()
        for p in model.params.trainable().values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        nx.adamw_step(model.params, opt)
    _, loss = _ce(model, batch)
    losses.append(loss.item())
    return losses


# -- training state ---------------------------------------------------------------------------------


@dataclass
class CurveRecord:
    step: int
    trained_task: str
    task: str
    score: float

    def to_json(self):
        return json.dumps(asdict(self))


@dataclass
class TrainState:
    task_index: int = 0
    global_step: int = 0
    best_score: float | None = None
    best_step: int = 0
    curves: list = field(default_factory=list)
    stopped_early: dict = field(default_factory=dict)
    steps_per_task: dict = field(default_factory=dict)


@dataclass
class RunResult:
    matrix: metrics.EvalMatrix
    state: TrainState
    model: ContinualModel
    buffer: ReplayBuffer | None = None
    gate_rows: dict | None = None


# -- harness ---------------------------------------------------------------------------------------


class Harness:
    """Owns the datasets, stack cache and bookkeeping for runs over one task suite."""

    def __init__(self, tasks: dict, data: dict, vocab: Vocabulary, model_config: ModelConfig | None = None,
                 seed=0, out_dir=None):
        self.tasks = tasks
        self.data = data
        self.vocab = vocab
        self.model_config = model_config or ModelConfig()
        self.seed = seed
        self.out_dir = out_dir
        self._caches = {}

    def cache_for(self, model: ContinualModel):
        key = model.encoder.checksum()
        if key not in self._caches:
            self._caches[key] = StackCache(model.encoder)
        return self._caches[key]

    def new_model(self, cfg: MethodConfig, decoder_seed=None):
        mc = self.model_config
        enc = mc.encoder
        dec = mc.decoder
        if decoder_seed is not None:
            dec = type(dec)(**{**asdict(dec), "seed": decoder_seed})
        mc = ModelConfig(enc, dec, use_gate=cfg.gated, temperature=cfg.gfl_temperature)
        return ContinualModel(self.vocab, mc)

    def task_score(self, model, task: TaskSpec, samples, cfg: MethodConfig):
        score, _ = decoding.evaluate(model, task, samples, self.cache_for(model), cfg.template, cfg.constrained)
        return score

    def _oriented(self, task, score):
        return score if task.higher_is_better else -score

    # -- one task ------------------------------------------------------------------------------
    def train_task(self, task: TaskSpec, cfg: MethodConfig, model: ContinualModel, buffer, state: TrainState,
                   seen, old_model=None, train_samples=None, val_tasks=None, first_task=False):
        """Mini-batch training of one task with validation-based early stopping."""
        train = train_samples if train_samples is not None else self.data[task.task_id].train
        if not train:
            raise DataError(f"task {task.task_id} has an empty training split")
        val_tasks = val_tasks or [task]
        cache = self.cache_for(model)
        bs = cfg.batch_size
        steps_per_epoch = -(-len(train) // bs)
        epochs = task.epochs if cfg.epoch_scale == 1.0 else max(1, int(round(task.epochs * cfg.epoch_scale)))
        total = epochs * steps_per_epoch
        opt = nx.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, warmup_fraction=cfg.warmup_fraction,
                                total_steps=total)
        rng = np.random.default_rng([int(self.seed), zlib.crc32(task.task_id.encode()), 7])
        best, best_step, best_params = None, 0, None
        local = 0
        stopped = False
        for epoch in range(epochs):
            order = np.random.default_rng([int(self.seed), state.task_index, epoch]).permutation(len(train))
            for start in range(0, len(train), bs):
                batch = collate([train[i] for i in order[start:start + bs]], cache, self.vocab)
                model.params.zero_grad()
                loss = method_loss(cfg, batch, model, buffer, old_model, rng, cache, first_task)
                if not np.isfinite(loss.item()):
                    raise nx.NumericError(f"non-finite loss on task {task.task_id} at step {state.global_step}")
                loss.backward()
                for n, p in model.params.trainable().items():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                nx.adamw_step(model.params, opt)
                local += 1
                state.global_step += 1
                if cfg.curve_every and state.global_step % cfg.curve_every == 0:
                    self._record_curves(model, cfg, state, task, seen)
                if local % cfg.eval_every == 0 or local == total:
                    score = float(np.mean([
                        self._oriented(t, self.task_score(model, t, self.data[t.task_id].validation, cfg))
                        for t in val_tasks
                    ]))
                    if best is None or score > best:
                        best, best_step = score, local
                        best_params = model.params.snapshot() if cfg.restore_best else None
                if local - best_step >= cfg.patience:
                    stopped = True
                    break
            if stopped:
                break
        if cfg.restore_best and best_params is not None:
            model.params.load(best_params)
        state.best_score, state.best_step = best, best_step
        state.stopped_early[task.task_id] = stopped
        state.steps_per_task[task.task_id] = local
        return model, buffer, state

    def _record_curves(self, model, cfg, state, task, seen):
        for t in seen:
            s = self.task_score(model, t, self.data[t.task_id].test, cfg)
            state.curves.append(CurveRecord(state.global_step, task.task_id, t.task_id, s))

    # -- sequences -----------------------------------------------------------------------------
    def train_sequence(self, order, cfg: MethodConfig, model: ContinualModel | None = None,
                       train_fraction=1.0, tag=""):
        """Train tasks strictly in order; after each task evaluate every task seen so far."""
        order = [o if isinstance(o, str) else o.task_id for o in order]
        if len(set(order)) != len(order):
            raise OrderError(f"duplicate task in order {order}")
        if cfg.method == "mtl":
            raise ConfigurationError("use run_mtl for joint training")
        model = model or self.new_model(cfg)
        if cfg.gated and model.gate is None:
            raise ConfigurationError(f"method {cfg.method} needs a model with a gate matrix")
        specs = [self.tasks[t] for t in order]
        matrix = metrics.EvalMatrix(order, {t.task_id: t.higher_is_better for t in specs})
        buffer = ReplayBuffer(cfg.buffer_capacity) if cfg.uses_buffer else None
        state = TrainState()
        cache = self.cache_for(model)
        old_model = None
        for k, task in enumerate(specs, 1):
            state.task_index = k - 1
            train = self.data[task.task_id].train
            if train_fraction < 1.0:
                train = few_shot_subset(train, train_fraction, self.seed)
            if cfg.method == "lwf" and k > 1:
                old_model = model.clone()
            model.register_task(task.task_id)
            self.train_task(task, cfg, model, buffer, state, specs[:k], old_model, train, first_task=(k == 1))
            for j, t in enumerate(specs[:k], 1):
                matrix.record(k, j, self.task_score(model, t, self.data[t.task_id].test, cfg))
            if buffer is not None:
                logits_fn = self._logits_fn(model, cache) if cfg.method == "derpp" else None
                buffer_insert(buffer, task.task_id, train, self.seed, logits_fn)
            if self.out_dir:
                save_checkpoint(os.path.join(self.out_dir, f"checkpoint_{tag}{k:02d}_{task.task_id}.npz"), model,
                                {"step": k, "task": task.task_id, "method": cfg.method})
            log.info("%s after %s: %s", cfg.method, task.task_id, matrix.row(k))
        return RunResult(matrix, state, model, buffer, dict(model.gate.rows) if model.gate else None)

    def _logits_fn(self, model, cache):
        def fn(samples):
            out = []
            with nx.no_grad():
                for start in range(0, len(samples), 128):
                    chunk = samples[start:start + 128]
                    b = collate(chunk, cache, self.vocab)
                    lg = model.logits(b.stacks, b.frame_mask, b.task_ids, b.inputs).data
                    out.extend(lg[i, : len(s.target)].copy() for i, s in enumerate(chunk))
            return out
        return fn

    def run_mtl(self, order, cfg: MethodConfig):
        """Joint training on the shuffled union of all train splits; one evaluation row."""
        order = [o if isinstance(o, str) else o.task_id for o in order]
        specs = [self.tasks[t] for t in order]
        model = self.new_model(cfg)
        union = [s for t in order for s in self.data[t].train]
        epochs = cfg.mtl_epochs or int(round(np.mean([t.epochs for t in specs])))
        joint = TaskSpec("MTL", "classification", (), "accuracy", labels=[("x",)], epochs=epochs)
        state = TrainState()
        for t in order:
            model.register_task(t)
        self.train_task(joint, cfg, model, None, state, specs, train_samples=union, val_tasks=specs)
        matrix = metrics.EvalMatrix(order, {t.task_id: t.higher_is_better for t in specs}, joint=True)
        for j, t in enumerate(specs, 1):
            matrix.record(1, j, self.task_score(model, t, self.data[t.task_id].test, cfg))
        if self.out_dir:
            save_checkpoint(os.path.join(self.out_dir, "checkpoint_mtl.npz"), model, {"method": "mtl"})
        return RunResult(matrix, state, model)

    def run_gfl_double_stage(self, order, cfg: MethodConfig):
        """Stage 1: GFL_S sequence (optionally few-shot). Stage 2: fresh decoder, frozen gate, rerun."""
        s1cfg = MethodConfig(**{**asdict(cfg), "method": "gfl_s"})
        try:
            stage1 = self.train_sequence(order, s1cfg, train_fraction=cfg.stage1_fraction, tag="stage1_")
        except nx.NumericError as e:
            raise StageFailure(f"stage 1 diverged: {e}") from e
        W = stage1.model.params["gate.W"].data.copy()
        model = self.new_model(cfg, decoder_seed=self.model_config.decoder.seed + 1)
        for t in stage1.model.gate.rows:
            model.register_task(t)
        model.params["gate.W"].data = W.copy()
        model.params.freeze("gate.W")
        s2cfg = MethodConfig(**{**asdict(cfg), "method": "gfl_d"})
        stage2 = self.train_sequence(order, s2cfg, model=model, tag="stage2_")
        stage2.stage1 = stage1
        return stage2
