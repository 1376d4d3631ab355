"""Finite-difference checks of every differentiable primitive and of the composed training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ContinualModel, DecoderConfig, EncoderConfig, ModelConfig, StackCache, Vocabulary, collate
from .tasks import FactorCodebook, default_tasks, generate_task_data

TOLERANCE = 1e-4


@dataclass
class ComponentResult:
    component: str
    worst_error: float
    worst_param: str
    probes: int

    @property
    def passed(self):
        return self.worst_error < TOLERANCE


@dataclass
class CheckCase:
    loss_fn: object
    params: nx.ParameterSet
    names: list | None = None  # parameters to probe; None means all trainable
    step_scale: dict | None = None


def _param_set(rng, **shapes):
    ps = nx.ParameterSet()
    for name, spec in shapes.items():
        shape, lo = spec if isinstance(spec[0], tuple) else (spec, None)
        data = rng.standard_normal(shape)
        if lo is not None:
            data = lo + np.abs(data)  # keeps log/reciprocal inputs away from zero
        ps.add(name, data)
    return ps


def _projected(out, rng):
    """Scalar loss sum(out * r) with a fixed random r, so every output entry matters."""
    r = rng.standard_normal(out.shape)
    return lambda t: nx.sum_(nx.mul(t, nx.Tensor(r)))


def _unary(op, positive=False):
    def build(rng):
        ps = _param_set(rng, x=((3, 4), 0.5) if positive else (3, 4))
        proj = _projected(op(ps["x"]), rng)
        return CheckCase(lambda: proj(op(ps["x"])), ps)
    return build


def _binary(op, a_shape, b_shape):
    def build(rng):
        ps = _param_set(rng, a=a_shape, b=b_shape)
        proj = _projected(op(ps["a"], ps["b"]), rng)
        return CheckCase(lambda: proj(op(ps["a"], ps["b"])), ps)
    return build


def _affine(rng):
    ps = _param_set(rng, x=(2, 3, 5), w=(5, 4), b=(4,))
    f = lambda: nx.affine(ps["x"], ps["w"], ps["b"])
    proj = _projected(f(), rng)
    return CheckCase(lambda: proj(f()), ps)


def _layer_norm(rng):
    ps = _param_set(rng, x=(3, 6), g=(6,), b=(6,))
    f = lambda: nx.layer_norm(ps["x"], ps["g"], ps["b"])
    proj = _projected(f(), rng)
    return CheckCase(lambda: proj(f()), ps)


def _take(rng):
    ps = _param_set(rng, x=(5, 3))
    idx = np.array([0, 2, 2, 4])
    proj = _projected(nx.take(ps["x"], idx), rng)
    return CheckCase(lambda: proj(nx.take(ps["x"], idx)), ps)


def _cross_entropy(rng):
    ps = _param_set(rng, z=(2, 3, 7))
    targets = np.array([[1, 4, -100], [0, 6, 2]])
    return CheckCase(lambda: nx.cross_entropy(ps["z"], targets, ignore_index=-100), ps)


def _tempered_softmax(rng, t=0.0005):
    ps = nx.ParameterSet()
    ps.add("w", 1e-3 * rng.standard_normal((3, 6)))
    f = lambda: nx.softmax_with_temperature(ps["w"], t)
    proj = _projected(f(), rng)
    return CheckCase(lambda: proj(f()), ps, step_scale={"w": t})


def composed_loss_builder(decoder=None, task_ids=("KS", "SID", "SF"), batch=4, seed=0, names=None):
    """Teacher-forced decoder loss over gated fusion of a frozen encoder, on a toy batch.

    The gate is probed in its tempered coordinate W / t (step scaled by t).
    """

    def build(rng):
        specs = default_tasks(sizes={"train": batch, "validation": 1, "test": 1})
        vocab = Vocabulary.build(specs.values())
        cfg = ModelConfig(EncoderConfig(seed=seed), decoder or DecoderConfig(width=16, heads=2, blocks=1, seed=seed))
        model = ContinualModel(vocab, cfg)
        cb = FactorCodebook(seed)
        samples = []
        for t in task_ids:
            model.register_task(t)
            samples += generate_task_data(specs[t], cb, seed).train
        # move off the zero init so the check is not at a symmetric point
        model.params["gate.W"].data = 1e-3 * rng.standard_normal(model.params["gate.W"].data.shape)
        b = collate(samples, StackCache(model.encoder), vocab)
        loss = lambda: nx.cross_entropy(model.logits(b.stacks, b.frame_mask, b.task_ids, b.inputs),
                                        b.labels, ignore_index=-100)
        return CheckCase(loss, model.params, names, {"gate.W": cfg.temperature})

    return build


def default_components():
    return {
        "add": _binary(nx.add, (3, 4), (4,)),
        "mul": _binary(nx.mul, (3, 4), (3, 1)),
        "matmul": _binary(nx.matmul, (2, 3, 4), (4, 5)),
        "neg": _unary(nx.neg),
        "scale": _unary(lambda x: nx.scale(x, 1.7)),
        "reciprocal": _unary(nx.reciprocal, positive=True),
        "exp": _unary(nx.exp),
        "log": _unary(nx.log, positive=True),
        "square": _unary(nx.square),
        "tanh": _unary(nx.tanh),
        "relu": _unary(nx.relu),
        "gelu": _unary(nx.gelu),
        "reshape": _unary(lambda x: nx.reshape(x, (4, 3))),
        "transpose": _unary(lambda x: nx.transpose(x, (1, 0))),
        "sum": _unary(lambda x: nx.sum_(x, axis=1, keepdims=True)),
        "mean": _unary(lambda x: nx.mean(x, axis=0)),
        "concat": _binary(lambda a, b: nx.concat([a, b], axis=1), (3, 2), (3, 4)),
        "stack": _binary(lambda a, b: nx.stack([a, b], axis=0), (3, 4), (3, 4)),
        "take": _take,
        "affine": _affine,
        "layer_norm": _layer_norm,
        "softmax": _unary(lambda x: nx.softmax(x)),
        "softmax_temperature": _tempered_softmax,
        "log_softmax": _unary(lambda x: nx.log_softmax(x, 2.0)),
        "cross_entropy": _cross_entropy,
        "gfl_decoder_loss": composed_loss_builder(),
        "gfl_decoder_loss[gate]": composed_loss_builder(names=["gate.W"]),
    }


def run_gradcheck(components=None, probes=32, step=1e-5, seed=0):
    """One ComponentResult per component; ``components`` maps name -> builder(rng) -> CheckCase."""
    components = components or default_components()
    out = []
    for i, (name, build) in enumerate(components.items()):
        rng = np.random.default_rng([seed, i])
        case = build(rng)
        probes_ = nx.finite_difference_probes(case.loss_fn, case.params, probes, step, seed, case.names,
                                              case.step_scale)
        worst = max(probes_, key=lambda r: r.error)
        out.append(ComponentResult(name, worst.error, worst.name, len(probes_)))
    return out
