import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from progdistill import tensor as T
from progdistill.compress import CompressionRequest
from progdistill.distill import (DistillConfig, StepRecord, consistency_loss, dual_forward,
                                 make_scheduler, train_run, train_step)
from progdistill.model import Batch, ForwardOutput, ModelConfig, ToyMLLM, loss_sft
from progdistill.schedule import FixedSchedule, ScheduleState

from conftest import PROPERTY

CFG = ModelConfig(n_layers=3, d_model=16, n_heads=2, ffn_dim=16, vocab_size=12,
                  n_visual_tokens=9, d_visual=4, max_seq_len=13)


def make_batch(seed=0, B=4):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(B, 9, 4)), rng.integers(0, 12, size=(B, 3)), (2, 3))


def batches(rng):
    return Batch(rng.normal(size=(4, 9, 4)), rng.integers(0, 12, size=(4, 3)), (2, 3))


def test_dual_forward_zero_ratios_match_plain():
    m = ToyMLLM(CFG, 0)
    b = make_batch()
    tea, stu = dual_forward(m, b, ScheduleState(0.0, 0.0, 2, 0.0), "random", np.random.default_rng(0))
    ref = m.forward(b).logits.data
    np.testing.assert_array_equal(tea.logits.data, ref)
    np.testing.assert_array_equal(stu.logits.data, ref)


def test_dual_forward_token_counts():
    m = ToyMLLM(CFG, 0)
    tea, stu = dual_forward(m, make_batch(), ScheduleState(8 / 9, 0.0, 2, 8 / 9), "random",
                            np.random.default_rng(0))
    assert tea.n_visual == 9 and stu.n_visual == 1


def test_dual_forward_rejects_inverted_state():
    m = ToyMLLM(CFG, 0)
    st_ = ScheduleState.__new__(ScheduleState)
    object.__setattr__(st_, "r_stu", 0.2)
    object.__setattr__(st_, "r_tea", 0.5)
    object.__setattr__(st_, "layer", 2)
    object.__setattr__(st_, "gap", 0.0)
    with pytest.raises(ValueError):
        dual_forward(m, make_batch(), st_, "random", np.random.default_rng(0))


def _fake_output(logits):
    return ForwardOutput(T.Tensor(np.asarray(logits, dtype=float)), np.zeros((1, 2), int), 0)


def test_consistency_loss_two_token_closed_form():
    b = Batch(np.zeros((1, 0, 4)), np.array([[0, 1]]), (1, 2))
    for a, c in [((0.3, -1.2), (2.0, 0.5)), ((1.0, 1.0), (0.0, 3.0)), ((-4.0, 4.0), (4.0, -4.0))]:
        tea = _fake_output([[a, (0.0, 0.0)]])
        stu = _fake_output([[c, (0.0, 0.0)]])
        p = np.exp(a) / np.exp(a).sum()
        q = np.exp(c) / np.exp(c).sum()
        expected = float((p * np.log(p / q)).sum())
        assert consistency_loss(tea, stu, b).item() == pytest.approx(expected, abs=1e-9)


def test_consistency_loss_zero_when_identical():
    m = ToyMLLM(CFG, 0)
    b = make_batch()
    tea, stu = dual_forward(m, b, ScheduleState(0.5, 0.5, 2, 0.0), "importance", None)
    assert consistency_loss(tea, stu, b).item() == 0.0


def test_consistency_loss_large_temperature_vanishes():
    m = ToyMLLM(CFG, 0)
    b = make_batch()
    tea = m.forward(b)
    stu = m.forward(b, CompressionRequest(0.8, 2), compressor="random", rng=np.random.default_rng(0))
    vals = [consistency_loss(tea, stu, b, tau).item() for tau in (1.0, 10.0, 1e4)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-8


def test_teacher_gets_no_gradient():
    """With the teacher detached only the student graph is differentiated."""
    m = ToyMLLM(CFG, 0)
    b = make_batch()
    state = ScheduleState(0.5, 0.0, 2, 0.5)
    tea, stu = dual_forward(m, b, state, "random", np.random.default_rng(0))
    assert not tea.logits.requires_grad and stu.logits.requires_grad
    # the KD gradient equals the gradient with the teacher frozen as a constant
    kd = consistency_loss(tea, stu, b)
    kd.backward()
    g_kd = {k: p.grad.copy() for k, p in m.params.items() if p.grad is not None}
    m.zero_grad()
    const = ForwardOutput(T.Tensor(tea.logits.data.copy()), tea.positions, tea.n_visual)
    # the r=0 teacher draws nothing, so a fresh rng reproduces the student's masks
    stu2 = m.forward(b, CompressionRequest(0.5, 2), compressor="random",
                     rng=np.random.default_rng(0))
    consistency_loss(const, stu2, b).backward()
    for k, g in g_kd.items():
        np.testing.assert_allclose(m.params[k].grad, g, atol=1e-12)


def test_teacher_stop_gradient_finite_difference():
    """Visual inputs pruned from the student reach the KD loss only via the teacher."""
    m = ToyMLLM(CFG, 0)
    b = make_batch()
    state = ScheduleState(1.0, 0.0, 2, 1.0)   # student keeps one token, teacher all nine

    def kd_grad_wrt_teacher_logits(detach):
        rng = np.random.default_rng(5)
        tea, stu = dual_forward(m, b, state, "random", rng, detach_teacher=detach)
        loss = consistency_loss(tea, stu, b)
        m.zero_grad()
        loss.backward()
        return tea.logits.grad

    assert kd_grad_wrt_teacher_logits(True) is None
    assert kd_grad_wrt_teacher_logits(False) is not None

    # finite-difference probe: nudge a visual feature the student prunes away
    rng = np.random.default_rng(5)
    _, stu = dual_forward(m, b, state, "random", rng)
    kept = set(stu.positions[0, :stu.n_visual].tolist())
    j = next(i for i in range(9) if i not in kept)

    def kd_at(eps, detach):
        bb = Batch(b.visual.copy(), b.text, b.answer_span)
        bb.visual[0, j] += eps
        with T.no_grad():
            tea, stu = dual_forward(m, bb, state, "random", np.random.default_rng(5), detach)
        return consistency_loss(tea, stu, bb).item()

    fd = (kd_at(1e-4, True) - kd_at(-1e-4, True)) / 2e-4
    assert fd != 0.0   # the loss value depends on it through the teacher

    # yet with the teacher detached its logits are a graph leaf, so no gradient flows back
    tea, _ = dual_forward(m, b, state, "random", np.random.default_rng(5), True)
    assert tea.logits._parents == ()


def test_joint_backprop_flag_changes_gradients():
    b = make_batch()
    state = ScheduleState(0.7, 0.2, 2, 0.5)
    grads = []
    for detach in (True, False):
        m = ToyMLLM(CFG, 0)
        tea, stu = dual_forward(m, b, state, "random", np.random.default_rng(1), detach_teacher=detach)
        consistency_loss(tea, stu, b).backward()
        grads.append(m.params["head.w"].grad.copy())
    assert not np.allclose(grads[0], grads[1])


def test_total_loss_arithmetic():
    lam, sft, kd = 0.7, 1.0, 0.5
    assert (1 - lam) * sft + lam * kd == pytest.approx(0.65)


def _one_step(cfg, seed=0):
    m = ToyMLLM(CFG, 0)
    sched = make_scheduler(cfg, CFG.n_layers)
    opt = T.Adam(m.parameters(), lr=cfg.learning_rate)
    rec = train_step(m, make_batch(seed), sched, cfg, 0, np.random.default_rng(seed), opt)
    return m, rec


def test_lambda_zero_equals_plain_sft_on_student():
    cfg = DistillConfig(mode="tcd", lam=0.0, steps=10, compressor="importance")
    m, rec = _one_step(cfg)
    ref = ToyMLLM(CFG, 0)
    b = make_batch()
    sched = make_scheduler(cfg, CFG.n_layers)
    state = sched.sample(0, np.random.default_rng(0))
    out = ref.forward(b, CompressionRequest(state.r_stu, state.layer), compressor="importance")
    opt = T.Adam(ref.parameters(), lr=cfg.learning_rate)
    loss_sft(out, b).backward()
    opt.step()
    for k in m.params:
        np.testing.assert_allclose(m.params[k].data, ref.params[k].data, atol=1e-12)
    assert rec.loss_total == pytest.approx(rec.loss_sft, abs=1e-12)


def test_direct_mode_is_lambda_free():
    cfg = DistillConfig(mode="direct", steps=5)
    _, rec = _one_step(cfg)
    assert rec.loss_kd == 0.0 and rec.loss_total == rec.loss_sft
    assert rec.state.r_stu == pytest.approx(8 / 9) and rec.state.layer == 2


def test_none_mode_has_no_state():
    _, rec = _one_step(DistillConfig(mode="none", steps=5))
    assert rec.state is None and rec.row()["layer"] == 0


def test_step_past_T_rejected():
    cfg = DistillConfig(mode="tcd", steps=3)
    m = ToyMLLM(CFG, 0)
    with pytest.raises(ValueError):
        train_step(m, make_batch(), make_scheduler(cfg, 3), cfg, 3, np.random.default_rng(0),
                   T.Adam(m.parameters()))


def test_config_validation():
    for kw in ({"lam": 1.5}, {"temperature": 0.0}, {"mode": "bogus"}, {"steps": 0}):
        with pytest.raises(ValueError):
            DistillConfig(**kw)


def test_make_scheduler_ablations():
    assert isinstance(make_scheduler(DistillConfig(mode="tcd", steps=10), 4, fixed_ratio=8 / 9),
                      FixedSchedule)
    lcd = make_scheduler(DistillConfig(mode="lcd", steps=10), 4, fixed_layer=2)
    assert lcd.fixed_layer == 2
    assert make_scheduler(DistillConfig(mode="none"), 4) is None


@PROPERTY
@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1), st.sampled_from(["tcd", "lcd", "icd"]))
def test_loss_decomposition_identity(lam, seed, mode):
    cfg = DistillConfig(mode=mode, lam=lam, steps=8, compressor="random")
    m = ToyMLLM(_TINY, 0)
    sched = make_scheduler(cfg, _TINY.n_layers)
    rng = np.random.default_rng(seed)
    state = sched.sample(float(rng.integers(0, 8)), rng)
    tea, stu = dual_forward(m, _TINY_BATCH, state, "random", rng)
    sft = loss_sft(stu, _TINY_BATCH)
    kd = consistency_loss(tea, stu, _TINY_BATCH)
    total = sft * (1 - lam) + kd * lam
    assert kd.item() >= 0.0
    assert abs(total.item() - ((1 - lam) * sft.item() + lam * kd.item())) <= 1e-9


_TINY = ModelConfig(n_layers=2, d_model=8, n_heads=2, ffn_dim=8, vocab_size=6,
                    n_visual_tokens=5, d_visual=2, max_seq_len=8)
_TINY_BATCH = Batch(np.random.default_rng(0).normal(size=(2, 5, 2)),
                    np.random.default_rng(0).integers(0, 6, size=(2, 3)), (1, 3))


def test_train_run_artifacts_and_determinism(tmp_path):
    cfg = DistillConfig(mode="tcd", steps=12, batch_size=4, compressor="redundancy", seed=3)
    a = train_run(ToyMLLM(CFG, 0), batches, cfg, tmp_path / "a")
    b = train_run(ToyMLLM(CFG, 0), batches, cfg, tmp_path / "b")
    for name in ("steps.csv", "model.ckpt", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "steps.csv")))
    assert len(rows) == 12 and list(rows[0]) == ["t", "mode", "layer", "r_stu", "r_tea", "gap",
                                                  "loss_sft", "loss_kd", "loss_total", "grad_norm"]
    for r in rows:
        total = (1 - cfg.lam) * float(r["loss_sft"]) + cfg.lam * float(r["loss_kd"])
        assert abs(total - float(r["loss_total"])) <= 1e-9
        assert float(r["loss_kd"]) >= 0.0
    echo = json.loads((tmp_path / "a" / "config.json").read_text())
    assert echo["schedule"]["kind"] == "TcdSchedule" and echo["distill"]["lam"] == 0.7
    assert [x.loss_total for x in a.records] == [x.loss_total for x in b.records]


def test_tcd_ratio_max_grows_across_thirds():
    cfg = DistillConfig(mode="tcd", steps=30, batch_size=2, compressor="random")
    art = train_run(ToyMLLM(CFG, 0), batches, cfg)
    r = np.array([x.state.r_stu for x in art.records])
    thirds = [r[:10].max(), r[10:20].max(), r[20:].max()]
    assert thirds[0] < thirds[1] < thirds[2]
