import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gflcl import numerics as nx
from gflcl.continual import overfit_batch
from gflcl.model import (EOT, PAD, SOT, AlreadyRegisteredError, ContinualModel, EncoderConfig, GateMatrix,
                         StackCache, SyntheticEncoder, TagMismatchError, UnknownTaskError, VocabularyError, collate,
                         decoder_forward, decoder_logits, fuse, fuse_batch, load_checkpoint, normalize_stack,
                         pad_stacks, save_checkpoint)
from gflcl.tasks import SLOT_TYPES, SPEAKER_LABELS, feature_width


# -- vocabulary ---------------------------------------------------------------------------------


def test_vocab_dense_unique(vocab):
    assert sorted(vocab.index.values()) == list(range(len(vocab)))
    assert len(set(vocab.tokens)) == len(vocab)


def test_vocab_one_tag_per_task(vocab, specs):
    tags = vocab.tag_ids()
    assert set(tags) == {s.tag for s in specs.values()}


def test_vocab_reserved_tokens(vocab):
    for tok in [PAD, SOT, EOT, *SPEAKER_LABELS] + [f"B-{s}" for s in SLOT_TYPES]:
        assert tok in vocab
    assert vocab.encode(["happy"]) == [vocab.index["happy"]]
    with pytest.raises(VocabularyError):
        vocab.encode(["definitely-not-a-token"])


# -- encoder ------------------------------------------------------------------------------------


def test_encode_deterministic_and_finite(rng):
    enc = SyntheticEncoder(EncoderConfig(seed=3))
    x = rng.standard_normal((4, feature_width()))
    a, b = enc.encode(x), enc.encode(x)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (6, 4, 32)
    assert np.all(np.isfinite(enc.encode(np.zeros((3, feature_width())))))


def test_encode_rejects_wrong_width():
    with pytest.raises(nx.DimensionError):
        SyntheticEncoder().encode(np.zeros((2, 7)))


def test_encoder_parameters_read_only():
    enc = SyntheticEncoder()
    with pytest.raises(ValueError):
        enc.recurrent[0][0, 0] = 1.0


# -- normalisation ----------------------------------------------------------------------------------


def test_normalize_constant_layer_is_zero(rng):
    states = rng.standard_normal((3, 2, 8))
    states[1] = 7.0
    out = normalize_stack(states)
    np.testing.assert_array_equal(out[1], 0.0)


def test_normalize_single_layer_matches_layer_norm(rng):
    states = rng.standard_normal((1, 5, 8))
    ref = nx.layer_norm(states[0], np.ones(8), np.zeros(8)).data
    np.testing.assert_array_equal(normalize_stack(states)[0], ref)


def test_normalize_matches_row_oracle(rng):
    states = rng.standard_normal((3, 4, 6))
    out = normalize_stack(states)
    for m in range(3):
        for t in range(4):
            row = states[m, t]
            mu = sum(row) / 6
            var = sum((v - mu) ** 2 for v in row) / 6
            ref = [(v - mu) / math.sqrt(var + 1e-5) for v in row]
            np.testing.assert_allclose(out[m, t], ref, atol=1e-12, rtol=0)


# -- gate and fusion ----------------------------------------------------------------------------------


def test_register_rows():
    g = GateMatrix(6)
    assert g.register_task("KS") == 0
    np.testing.assert_array_equal(g.W.data[0], np.zeros(6))
    g.W.data[0] = np.arange(6.0)
    before = g.W.data[0].tobytes()
    assert g.register_task("SID") == 1
    assert g.W.data[0].tobytes() == before
    for t in ("ER", "IC", "SF"):
        g.register_task(t)
    assert g.W.data.shape == (5, 6)
    with pytest.raises(AlreadyRegisteredError):
        g.register_task("KS")


def test_zero_gate_gives_layer_mean(rng):
    g = GateMatrix(6)
    g.register_task("ER")
    stack = rng.standard_normal((6, 3, 5))
    out = fuse(stack, g, "ER").frames.data
    np.testing.assert_allclose(out, stack.mean(axis=0), atol=1e-12, rtol=0)


def test_one_hot_gate_selects_layer(rng):
    g = GateMatrix(6, temperature=0.0005)
    g.register_task("ER")
    g.W.data[0, 2] = 0.05
    stack = rng.standard_normal((6, 3, 5))
    np.testing.assert_allclose(fuse(stack, g, "ER").frames.data, stack[2], atol=1e-6)


def test_fuse_matches_weighted_sum_oracle(rng):
    g = GateMatrix(4, temperature=0.7)
    g.register_task("A")
    g.W.data[0] = rng.standard_normal(4)
    stack = rng.standard_normal((4, 2, 3))
    z = g.W.data[0] / 0.7
    w = [math.exp(v) for v in z]
    w = [v / sum(w) for v in w]
    ref = sum(w[m] * stack[m] for m in range(4))
    np.testing.assert_allclose(fuse(stack, g, "A").frames.data, ref, atol=1e-12, rtol=0)


def test_fuse_unknown_task(rng):
    g = GateMatrix(3)
    with pytest.raises(UnknownTaskError):
        fuse(rng.standard_normal((3, 1, 2)), g, "KS")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.02, 0.02), min_size=6, max_size=6), st.integers(0, 2**31 - 1))
def test_gate_convexity(row, seed):
    r = np.random.default_rng(seed)
    g = GateMatrix(6, temperature=0.0005)
    g.register_task("T")
    g.W.data[0] = row
    w = g.weights("T").data
    assert abs(w.sum() - 1.0) <= 1e-12 and np.all(w >= 0)
    stack = r.standard_normal((6, 2, 4))
    out = fuse(stack, g, "T").frames.data
    assert np.all(out <= stack.max(axis=0) + 1e-12) and np.all(out >= stack.min(axis=0) - 1e-12)


def test_fuse_batch_matches_fuse(rng):
    g = GateMatrix(6, temperature=0.01)
    for t in ("A", "B"):
        g.register_task(t)
    g.W.data[:] = rng.standard_normal((2, 6)) * 0.02
    stacks = rng.standard_normal((3, 6, 2, 4))
    ids = ["A", "B", "A"]
    out = fuse_batch(stacks, g, ids).data
    for b in range(3):
        np.testing.assert_allclose(out[b], fuse(stacks[b], g, ids[b]).frames.data, atol=1e-14)


def test_task_row_isolation(tiny_model, small_data):
    m = tiny_model
    for t in ("KS", "SID", "ER"):
        m.register_task(t)
    m.params["gate.W"].data = 1e-3 * np.random.default_rng(0).standard_normal((3, 6))
    b = collate(small_data["SID"].train[:8], StackCache(m.encoder), m.vocab)
    nx.cross_entropy(m.logits(b.stacks, b.frame_mask, b.task_ids, b.inputs), b.labels, -100).backward()
    gW = m.params["gate.W"].grad
    assert np.any(gW[1] != 0)
    assert np.all(gW[0] == 0) and np.all(gW[2] == 0)


# -- decoder --------------------------------------------------------------------------------------------


def _one_sample(small_data, task="ER"):
    return small_data[task].train[0]


def test_untrained_loss_near_log_vocab(vocab, small_data):
    m = ContinualModel(vocab)
    m.register_task("ER")
    s = _one_sample(small_data)
    fused = fuse(StackCache(m.encoder)(s), m.gate, "ER")
    _, loss = decoder_forward(m, fused, s.target)
    assert abs(loss.item() - math.log(len(vocab))) / math.log(len(vocab)) < 0.05


def test_tag_mismatch(tiny_model, small_data):
    tiny_model.register_task("ER")
    s = _one_sample(small_data)
    fused = fuse(StackCache(tiny_model.encoder)(s), tiny_model.gate, "ER")
    with pytest.raises(TagMismatchError):
        decoder_forward(tiny_model, fused, ["<|KS|>"] + s.target[1:])


def test_frame_order_matters(tiny_model, rng):
    m = tiny_model
    ids = np.array([[m.vocab.sot, m.vocab.index["<|ER|>"], m.vocab.index["happy"]]])
    mem = rng.standard_normal((1, 4, 32))
    a = decoder_logits(m.params, m.config.decoder, mem, None, ids).data
    b = decoder_logits(m.params, m.config.decoder, mem[:, ::-1], None, ids).data
    assert not np.allclose(a, b)
    one = mem[:, :1]
    # a single frame cannot be permuted
    np.testing.assert_array_equal(decoder_logits(m.params, m.config.decoder, one, None, ids).data,
                                  decoder_logits(m.params, m.config.decoder, one[:, ::-1], None, ids).data)


def test_causality(tiny_model, rng):
    m = tiny_model
    V = len(m.vocab)
    ids = rng.integers(3, V, size=(2, 7))
    mem = rng.standard_normal((2, 3, 32))
    base = decoder_logits(m.params, m.config.decoder, mem, None, ids).data
    p = 3
    changed = ids.copy()
    changed[:, p + 1:] = 0
    out = decoder_logits(m.params, m.config.decoder, mem, None, changed).data
    np.testing.assert_array_equal(out[:, : p + 1], base[:, : p + 1])


def test_padded_frames_are_ignored(tiny_model, rng):
    m = tiny_model
    ids = np.array([[m.vocab.sot, m.vocab.index["<|ER|>"]]])
    mem = rng.standard_normal((1, 5, 32))
    mask = np.array([[True, True, True, False, False]])
    a = decoder_logits(m.params, m.config.decoder, mem, mask, ids).data
    mem2 = mem.copy()
    mem2[:, 3:] = 100.0
    b = decoder_logits(m.params, m.config.decoder, mem2, mask, ids).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pad_stacks_shapes(rng):
    stacks, mask = pad_stacks([rng.standard_normal((6, 2, 4)), rng.standard_normal((6, 4, 4))])
    assert stacks.shape == (2, 6, 4, 4)
    assert mask.tolist() == [[True, True, False, False], [True] * 4]


def test_overfit_one_batch(vocab, small_data):
    m = ContinualModel(vocab)
    m.register_task("ER")
    b = collate(small_data["ER"].train[:16], StackCache(m.encoder), vocab)
    losses = overfit_batch(m, b, steps=200)
    assert losses[-1] < 0.05


def test_encoder_unchanged_by_training(vocab, small_data):
    m = ContinualModel(vocab)
    m.register_task("ER")
    before = m.encoder.checksum()
    b = collate(small_data["ER"].train[:8], StackCache(m.encoder), vocab)
    overfit_batch(m, b, steps=3)
    assert m.encoder.checksum() == before


# -- checkpoints ------------------------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, tiny_model, small_data):
    m = tiny_model
    for t in ("KS", "ER"):
        m.register_task(t)
    m.params["gate.W"].data[:] = np.random.default_rng(2).standard_normal((2, 6))
    m.params.freeze("gate.W")
    path = tmp_path / "m.npz"
    save_checkpoint(path, m, {"step": 2})
    m2, meta = load_checkpoint(path)
    assert meta["version"] == 1 and meta["extra"] == {"step": 2}
    assert m2.checksum() == m.checksum()
    assert m2.gate.rows == m.gate.rows and m2.params.frozen == {"gate.W"}
    b = collate(small_data["ER"].test[:4], StackCache(m.encoder), m.vocab)
    np.testing.assert_array_equal(m.logits(b.stacks, b.frame_mask, b.task_ids, b.inputs).data,
                                  m2.logits(b.stacks, b.frame_mask, b.task_ids, b.inputs).data)
