import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from progdistill import compress as C
from progdistill import gradcheck
from progdistill import tensor as T
from progdistill.model import (Batch, ModelConfig, TokenSequence, ToyMLLM, answer_logits,
                               load_checkpoint, loss_sft, project_visual)

from conftest import PROPERTY


def small(n_visual=6, vocab=16, layers=3, seed=0):
    cfg = ModelConfig(n_layers=layers, d_model=16, n_heads=2, ffn_dim=32, vocab_size=vocab,
                      n_visual_tokens=n_visual, d_visual=5, max_seq_len=n_visual + 8)
    return ToyMLLM(cfg, seed=seed)


def batch_for(model, B=3, n_text=4, seed=0, span=(2, 4)):
    rng = np.random.default_rng(seed)
    cfg = model.config
    return Batch(rng.normal(size=(B, cfg.n_visual_tokens, cfg.d_visual)),
                 rng.integers(0, cfg.vocab_size, size=(B, n_text)), span)


def test_projector_zero_in_zero_out():
    m = small()
    p = dict(m.params)
    for k in ("proj.b1", "proj.b2"):
        p[k] = T.Tensor(np.zeros_like(p[k].data))
    out = project_visual(np.zeros((4, 5)), p)
    assert out.shape == (4, 16)
    np.testing.assert_array_equal(out.data, 0.0)


def test_projector_grad_matches_fd():
    m = small()
    feats = np.random.default_rng(1).normal(size=(3, 5))
    w1, w2 = m.params["proj.w1"].data.copy(), m.params["proj.w2"].data.copy()

    def build(t):
        return project_visual(t[0], {"proj.w1": t[1], "proj.b1": m.params["proj.b1"],
                                     "proj.w2": t[2], "proj.b2": m.params["proj.b2"]})

    assert gradcheck.check(build, [feats, w1, w2]) < 1e-4


@pytest.mark.parametrize("kind", C.COMPRESSORS)
def test_r0_is_bit_identical(kind):
    m = small()
    b = batch_for(m)
    ref = m.forward(b)
    out = m.forward(b, C.CompressionRequest(0.0, 2), compressor=kind, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(ref.logits.data, out.logits.data)
    assert loss_sft(ref, b).item() == loss_sft(out, b).item()


def test_576_tokens_shorten_by_512():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, ffn_dim=8, vocab_size=8,
                      n_visual_tokens=576, d_visual=3, max_seq_len=580)
    m = ToyMLLM(cfg, seed=0)
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(1, 576, 3)), rng.integers(0, 8, size=(1, 3)), (1, 3))
    out = m.forward(b, C.CompressionRequest(8 / 9, 2), compressor="random", rng=rng)
    assert out.seq_len == 579 - 512
    assert out.retention.retained == 64


def test_importance_at_layer_one_errors():
    m = small()
    with pytest.raises(C.CompressionError):
        m.forward(batch_for(m), C.CompressionRequest(0.5, 1), compressor="importance")


def test_layer_out_of_range():
    m = small()
    with pytest.raises(C.CompressionError):
        m.forward(batch_for(m), C.CompressionRequest(0.5, 4), compressor="random",
                  rng=np.random.default_rng(0))


def test_importance_runs_at_layer_two():
    m = small()
    out = m.forward(batch_for(m), C.CompressionRequest(0.5, 2), compressor="importance")
    assert out.n_visual == 3


def test_single_sequence_forward():
    m = small()
    b = batch_for(m, B=1)
    seq = TokenSequence(b.visual[0], b.text[0], b.answer_span)
    np.testing.assert_array_equal(m.forward(seq).logits.data, m.forward(b).logits.data)


def test_causality():
    m = small()
    b = batch_for(m, B=1)
    base = m.forward(b).logits.data
    n = m.config.n_visual_tokens
    for i in range(n + b.text.shape[1] - 1):
        pert = Batch(b.visual.copy(), b.text.copy(), b.answer_span)
        j = i + 1
        if j < n:
            pert.visual[0, j] += 1.0
        else:
            pert.text[0, j - n] = (pert.text[0, j - n] + 1) % m.config.vocab_size
        out = m.forward(pert).logits.data
        np.testing.assert_array_equal(out[0, :j], base[0, :j])
        assert not np.array_equal(out[0, j:], base[0, j:])


def test_loss_near_log_vocab_at_init():
    m = small(vocab=16)
    b = batch_for(m, B=64)
    assert abs(loss_sft(m.forward(b), b).item() - math.log(16)) < 0.5


def test_loss_small_when_forced():
    m = small()
    b = batch_for(m)
    out = m.forward(b)
    logits = out.logits.data.copy()
    n = out.n_visual
    for k, pos in enumerate(range(b.answer_span[0] - 1, b.answer_span[1] - 1)):
        logits[np.arange(3), n + pos] = 0.0
        logits[np.arange(3), n + pos, b.answers[:, k]] = 1e4
    out.logits = T.Tensor(logits)
    assert loss_sft(out, b).item() < 1e-3


def test_answer_rows_follow_pruning():
    m = small(n_visual=10)
    b = batch_for(m)
    full = answer_logits(m.forward(b), b)
    pruned = answer_logits(m.forward(b, C.CompressionRequest(0.7, 3), compressor="random",
                                     rng=np.random.default_rng(0)), b)
    assert full.shape == pruned.shape == (3, 2, 16)


@PROPERTY
@given(st.integers(0, 100), st.integers(1, 3), st.sampled_from(C.COMPRESSORS), st.integers(0, 10**6))
def test_text_tokens_preserved(r100, layer, kind, seed):
    if kind == "importance" and layer == 1:
        layer = 2
    m = _PROP_MODEL
    b = _PROP_BATCH
    out = m.forward(b, C.CompressionRequest(r100 / 100, layer), compressor=kind,
                    rng=np.random.default_rng(seed))
    n, n_text = b.n_visual, b.text.shape[1]
    np.testing.assert_array_equal(out.positions[:, -n_text:], np.tile(np.arange(n, n + n_text), (2, 1)))
    assert out.n_visual == C.keep_count(n, r100 / 100)
    vis = out.positions[:, :out.n_visual]
    assert (np.diff(vis, axis=1) > 0).all() and (vis < n).all()


_PROP_MODEL = ToyMLLM(ModelConfig(n_layers=3, d_model=8, n_heads=2, ffn_dim=8, vocab_size=8,
                                  n_visual_tokens=12, d_visual=3, max_seq_len=16), seed=0)
_PROP_BATCH = Batch(np.random.default_rng(0).normal(size=(2, 12, 3)),
                    np.random.default_rng(1).integers(0, 8, size=(2, 3)), (1, 3))


def test_checkpoint_round_trip(tmp_path):
    m = small()
    m.save(tmp_path / "a.ckpt")
    m2 = ToyMLLM.load(tmp_path / "a.ckpt")
    b = batch_for(m)
    np.testing.assert_array_equal(m.forward(b).logits.data, m2.forward(b).logits.data)
    m2.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    params, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta["n_layers"] == 3 and set(params) == set(m.params)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
    m = small()
    m.save(tmp_path / "y")
    (tmp_path / "y").write_bytes((tmp_path / "y").read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "y")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_visual_tokens=64, max_seq_len=64)
    m = small()
    b = Batch(np.zeros((1, 6, 5)), np.zeros((1, 20), dtype=int), (1, 2))
    with pytest.raises(ValueError):
        m.forward(b)
