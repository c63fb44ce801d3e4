"""Progressive consistency distillation training loop.

One shared model runs twice per step: a teacher pass at the lower ratio and
a student pass at the higher one. The student is trained on

    (1 - lam) * SFT(student) + lam * KL(p_teacher || p_student)

with both distributions taken over the answer positions at temperature ``tau``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .compress import CompressionRequest
from .model import Batch, ForwardOutput, ToyMLLM, answer_logits, loss_sft
from .schedule import FixedSchedule, IcdSchedule, LcdSchedule, ScheduleState, TcdSchedule

log = logging.getLogger(__name__)

MODES = ("tcd", "lcd", "icd", "direct", "none")

STEP_COLUMNS = ("t", "mode", "layer", "r_stu", "r_tea", "gap",
                "loss_sft", "loss_kd", "loss_total", "grad_norm")


class Scheduler(Protocol):
    T: int

    def sample(self, t: float, rng: np.random.Generator) -> ScheduleState: ...


class DivergenceError(RuntimeError):
    pass


@dataclass
class DistillConfig:
    lam: float = 0.7
    temperature: float = 1.0
    mode: str = "tcd"
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    compressor: str = "redundancy"
    direct_ratio: float = 8 / 9
    layer: int = 2
    detach_teacher: bool = True
    n_pivots: int = 8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


@dataclass
class StepRecord:
    t: int
    mode: str
    state: ScheduleState | None
    loss_sft: float
    loss_kd: float
    loss_total: float
    grad_norm: float

    def row(self) -> dict:
        st = self.state
        return {
            "t": self.t, "mode": self.mode,
            "layer": st.layer if st else 0,
            "r_stu": f"{st.r_stu:.12g}" if st else "0",
            "r_tea": f"{st.r_tea:.12g}" if st else "0",
            "gap": f"{st.gap:.12g}" if st else "0",
            "loss_sft": f"{self.loss_sft:.12g}", "loss_kd": f"{self.loss_kd:.12g}",
            "loss_total": f"{self.loss_total:.12g}", "grad_norm": f"{self.grad_norm:.12g}",
        }


def dual_forward(model: ToyMLLM, batch: Batch, state: ScheduleState, compressor: str,
                 rng: np.random.Generator, detach_teacher: bool = True,
                 n_pivots: int = 8) -> tuple[ForwardOutput, ForwardOutput]:
    """Teacher pass at ``state.r_tea`` and student pass at ``state.r_stu``, same weights.

    With ``detach_teacher`` the teacher graph is not recorded, so its logits act
    as constants in the loss. Stochastic compressors draw the two masks
    independently from ``rng``.
    """
    if state.r_tea > state.r_stu:
        raise ValueError("teacher ratio exceeds student ratio")
    kw = dict(compressor=compressor, rng=rng, n_pivots=n_pivots)
    if detach_teacher:
        with T.no_grad():
            teacher = model.forward(batch, CompressionRequest(state.r_tea, state.layer), **kw)
    else:
        teacher = model.forward(batch, CompressionRequest(state.r_tea, state.layer), **kw)
    student = model.forward(batch, CompressionRequest(state.r_stu, state.layer), **kw)
    return teacher, student


def consistency_loss(teacher: ForwardOutput, student: ForwardOutput, batch: Batch,
                     temperature: float = 1.0) -> T.Tensor:
    """KL(p_teacher || p_student) at the answer-predicting positions."""
    h_tea = answer_logits(teacher, batch)
    h_stu = answer_logits(student, batch)
    if h_tea.shape != h_stu.shape:
        raise ValueError(f"answer span misaligned: {h_tea.shape} vs {h_stu.shape}")
    p_tea = T.softmax(h_tea, temperature)
    p_stu = T.softmax(h_stu, temperature)
    return T.kl_divergence(p_tea, p_stu)


def make_scheduler(config: DistillConfig, n_layers: int, **overrides) -> Scheduler | None:
    """Scheduler for ``config.mode``; keyword overrides feed the schedule dataclass.

    ``fixed_ratio=r`` on tcd swaps in a constant-ratio schedule; ``fixed_layer=l``
    on lcd pins the layer.
    """
    mode, steps = config.mode, config.steps
    if mode == "tcd":
        fixed = overrides.pop("fixed_ratio", None)
        if fixed is not None:
            return FixedSchedule(T=steps, ratio=fixed, layer=overrides.get("fixed_layer", config.layer))
        overrides.setdefault("fixed_layer", config.layer)
        return TcdSchedule(T=steps, **overrides)
    if mode == "lcd":
        return LcdSchedule(T=steps, L=n_layers, **overrides)
    if mode == "icd":
        return IcdSchedule(T=steps, L=n_layers, **overrides)
    if mode == "direct":
        return FixedSchedule(T=steps, ratio=config.direct_ratio, layer=config.layer)
    return None


def _grad_norm(params) -> float:
    return math.sqrt(float(np.sum([np.sum(p.grad**2) for p in params if p.grad is not None])))


def train_step(model: ToyMLLM, batch: Batch, scheduler: Scheduler | None, config: DistillConfig,
               t: int, rng: np.random.Generator, optimizer: T.Adam) -> StepRecord:
    """Sample a schedule state, take one optimiser step, and log it."""
    if scheduler is not None and t >= scheduler.T:
        raise ValueError(f"step {t} must be < T={scheduler.T}")
    optimizer.zero_grad()
    lam = config.lam
    state = None
    if config.mode == "none":
        out = model.forward(batch)
        sft = loss_sft(out, batch)
        total, kd_val, lam = sft, 0.0, 0.0
    elif config.mode == "direct":
        state = scheduler.sample(t, rng)
        out = model.forward(batch, CompressionRequest(state.r_stu, state.layer),
                            compressor=config.compressor, rng=rng, n_pivots=config.n_pivots)
        sft = loss_sft(out, batch)
        total, kd_val, lam = sft, 0.0, 0.0
    else:
        state = scheduler.sample(t, rng)
        teacher, student = dual_forward(model, batch, state, config.compressor, rng,
                                        config.detach_teacher, config.n_pivots)
        sft = loss_sft(student, batch)
        kd = consistency_loss(teacher, student, batch, config.temperature)
        kd_val = kd.item()
        total = sft * (1.0 - lam) + kd * lam

    sft_val, total_val = sft.item(), total.item()
    if not all(math.isfinite(v) for v in (sft_val, kd_val, total_val)):
        raise DivergenceError(f"non-finite loss at step {t}: sft={sft_val} kd={kd_val}")
    total.backward()
    gn = _grad_norm(model.parameters())
    optimizer.step()
    return StepRecord(t, config.mode, state, sft_val, kd_val, total_val, gn)


@dataclass
class RunArtifact:
    out_dir: Path
    checkpoint: Path
    steps_csv: Path
    config_json: Path
    records: list[StepRecord] = field(default_factory=list)
    model: ToyMLLM | None = None


def train_run(model: ToyMLLM, batches: Callable[[np.random.Generator], Batch], config: DistillConfig,
              out_dir=None, schedule_overrides: dict | None = None,
              extra_meta: dict | None = None) -> RunArtifact:
    """Train for ``config.steps`` steps.

    ``batches(rng)`` draws one training batch. When ``out_dir`` is given the
    checkpoint, per-step CSV and config echo are written there.
    """
    overrides = dict(schedule_overrides or {})
    scheduler = make_scheduler(config, model.config.n_layers, **overrides)
    rng = np.random.default_rng(config.seed)
    data_rng, sched_rng = rng.spawn(2)
    opt = T.Adam(model.parameters(), lr=config.learning_rate)
    records = []
    for t in range(config.steps):
        batch = batches(data_rng)
        records.append(train_step(model, batch, scheduler, config, t, sched_rng, opt))
        if t % 250 == 0 or t == config.steps - 1:
            r = records[-1]
            log.info("step %d mode=%s sft=%.4f kd=%.4f", t, config.mode, r.loss_sft, r.loss_kd)

    art = RunArtifact(Path(out_dir) if out_dir else Path("."), Path(), Path(), Path(), records, model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        art.checkpoint = out / "model.ckpt"
        art.steps_csv = out / "steps.csv"
        art.config_json = out / "config.json"
        model.save(art.checkpoint)
        write_steps_csv(art.steps_csv, records)
        echo = {"distill": asdict(config), "schedule": _schedule_echo(scheduler),
                "model": asdict(model.config), **(extra_meta or {})}
        art.config_json.write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return art


def _schedule_echo(scheduler) -> dict:
    if scheduler is None:
        return {"kind": "none"}
    return {"kind": type(scheduler).__name__, **asdict(scheduler)}


def write_steps_csv(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
