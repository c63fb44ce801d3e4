"""Experiment orchestration: configs, evaluation and the result matrix."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from . import tensor as T
from .compress import COMPRESSORS, CompressionRequest, keep_count
from .distill import DistillConfig, train_run
from .model import ModelConfig, ToyMLLM, answer_logits
from .task import SyntheticTask, TaskBatch, gen_batch

log = logging.getLogger(__name__)

# matrix mode label -> (distill mode, schedule overrides)
MODE_LABELS = {
    "none": ("none", {}),
    "direct": ("direct", {}),
    "tcd": ("tcd", {}),
    "lcd": ("lcd", {}),
    "icd": ("icd", {}),
    "tcd-fixed-ratio": ("tcd", {"fixed_ratio": 8 / 9}),
    "lcd-fixed-layer": ("lcd", {"fixed_layer": 2}),
}

RESULT_COLUMNS = ("config_hash", "version", "mode", "train_compressor", "seed", "eval_compressor",
                  "ratio", "retained", "n_samples", "correct", "accuracy")


@dataclass
class ExperimentConfig:
    task: SyntheticTask = field(default_factory=SyntheticTask)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=2, d_model=64, n_heads=2,
                                                                   ffn_dim=128))
    # 2 pivots: 8 of 576 scaled to a 64-token board, still leaving room to fill at r = 8/9
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(n_pivots=2))
    tcd: dict = field(default_factory=dict)
    lcd: dict = field(default_factory=dict)
    icd: dict = field(default_factory=dict)
    modes: list = field(default_factory=lambda: ["none", "direct", "tcd"])
    train_compressors: list = field(default_factory=lambda: ["redundancy"])
    eval_compressors: list = field(default_factory=lambda: ["redundancy", "random", "importance"])
    eval_ratios: list = field(default_factory=lambda: [0.0, 0.5, 8 / 9])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_samples: int = 256
    eval_layer: int = 2
    workers: int = 1

    def __post_init__(self):
        # the model's vocabulary and length are dictated by the task
        self.model = replace(self.model, vocab_size=self.task.vocab_size,
                             max_seq_len=self.task.seq_len,
                             n_visual_tokens=self.task.n_visual, d_visual=self.task.d_visual)
        self.eval_ratios = [float(r) for r in self.eval_ratios]
        self.seeds = [int(x) for x in self.seeds]
        for r in self.eval_ratios:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"eval ratio {r} outside [0, 1]")
        for c in list(self.train_compressors) + list(self.eval_compressors):
            if c not in COMPRESSORS:
                raise ValueError(f"unknown compressor {c!r}")
        for m in self.modes:
            if m not in MODE_LABELS:
                raise ValueError(f"unknown mode {m!r}; expected one of {sorted(MODE_LABELS)}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        # worker count changes scheduling only, never results
        d = {k: v for k, v in self.to_dict().items() if k != "workers"}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def schedule_overrides(self, label: str) -> dict:
        mode, extra = MODE_LABELS[label]
        base = {"tcd": self.tcd, "lcd": self.lcd, "icd": self.icd}.get(mode, {})
        return {**base, **extra}


# flat key = value config files -----------------------------------------------

_SECTIONS = {"task": SyntheticTask, "model": ModelConfig, "distill": DistillConfig}
_LIST_KEYS = {"modes", "train_compressors", "eval_compressors", "eval_ratios", "seeds"}
_NAME_KEYS = {"modes", "train_compressors", "eval_compressors"}   # kept as strings


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    if "/" in t:
        try:
            return float(Fraction(t))
        except (ValueError, ZeroDivisionError):
            pass
    return t.strip("\"'")


def parse_config_text(text: str) -> dict:
    """Parse ``section.key = value`` lines into nested dicts."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if len(parts) == 1:
            if key in _NAME_KEYS:
                out[key] = [v.strip().strip("\"'") for v in value.split(",")]
            elif key in _LIST_KEYS:
                out[key] = [_parse_scalar(v) for v in value.split(",")]
            else:
                out[key] = _parse_scalar(value)
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = _parse_scalar(value)
        else:
            raise ValueError(f"line {lineno}: keys nest at most one level ({key!r})")
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    kw = {}
    defaults = ExperimentConfig()
    for section, cls in _SECTIONS.items():
        if section in d:
            names = {f.name for f in fields(cls)}
            unknown = set(d[section]) - names
            if unknown:
                raise ValueError(f"unknown {section} keys: {sorted(unknown)}")
            # sections override the grid defaults, not the bare dataclass defaults
            kw[section] = replace(getattr(defaults, section), **d[section])
    for section in ("tcd", "lcd", "icd"):
        if section in d:
            kw[section] = dict(d[section])
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS) - {"tcd", "lcd", "icd"}
    for k, v in d.items():
        if k in _SECTIONS or k in ("tcd", "lcd", "icd"):
            continue
        if k not in top:
            raise ValueError(f"unknown config key {k!r}")
        kw[k] = v
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    return config_from_dict(parse_config_text(Path(path).read_text()))


# evaluation ----------------------------------------------------------------


@dataclass
class EvalResult:
    compressor: str
    ratio: float
    retained: int
    accuracy: float
    seed: int
    n_samples: int
    correct: int


def predict(model: ToyMLLM, batch: TaskBatch, task: SyntheticTask, compressor: str, ratio: float,
            rng: np.random.Generator, layer: int = 2, n_pivots: int = 8) -> np.ndarray:
    """Greedy answer token ``[B, Q]`` for every query, argmax over the answer vocabulary."""
    request = CompressionRequest(ratio, layer) if ratio > 0 else None
    with T.no_grad():
        out = model.forward(batch, request, compressor=compressor, rng=rng, n_pivots=n_pivots)
    logits = answer_logits(out, batch).data
    vocab = task.answer_vocab
    return vocab[np.argmax(logits[..., vocab], axis=-1)]


def evaluate(checkpoint, compressor: str, ratio: float, n_samples: int, rng: np.random.Generator,
             task: SyntheticTask | None = None, layer: int = 2, batch: TaskBatch | None = None,
             seed: int = 0, chunk: int = 256, n_pivots: int = 8) -> EvalResult:
    """Exact-match accuracy under inference-time compression.

    ``checkpoint`` is a model or a checkpoint path. Boards come from ``batch``
    when given, otherwise ``n_samples`` fresh ones are drawn from ``rng``.
    Every query on every board counts once, so the result's ``n_samples`` is
    boards times queries.
    """
    if compressor not in COMPRESSORS:
        raise ValueError(f"unknown compressor {compressor!r}")
    task = task or SyntheticTask()
    model = checkpoint if isinstance(checkpoint, ToyMLLM) else ToyMLLM.load(checkpoint)
    if batch is None:
        batch = gen_batch(task, n_samples, rng)
    n = batch.answers.size
    correct = 0
    for s in range(0, len(batch), chunk):
        part = batch.subset(slice(s, s + chunk))
        pred = predict(model, part, task, compressor, ratio, rng, layer, n_pivots)
        correct += int((pred == part.answers).sum())
    return EvalResult(compressor, float(ratio), keep_count(task.n_visual, ratio), correct / n,
                      seed, n, correct)


def chance_level(task: SyntheticTask, batch: TaskBatch) -> float:
    """Accuracy of the best image-blind answer on ``batch``.

    The blind guesser knows each query's template, so it answers the most
    common token per template.
    """
    ans, qt = batch.answers.ravel(), batch.query_type.ravel()
    hits = 0
    for t in np.unique(qt):
        _, counts = np.unique(ans[qt == t], return_counts=True)
        hits += counts.max()
    return float(hits / ans.size)


def beats_chance(correct: int, n: int, p0: float, alpha: float = 0.01) -> tuple[bool, float]:
    """One-sided binomial test of accuracy > p0."""
    p = stats.binomtest(correct, n, p0, alternative="greater").pvalue
    return bool(p < alpha), float(p)


# matrix ----------------------------------------------------------------------


def eval_batch(config: ExperimentConfig, seed: int) -> TaskBatch:
    """Held-out queries for one seed; disjoint rng stream from training."""
    return gen_batch(config.task, config.eval_samples, np.random.default_rng([seed, 7919]))


def _run_cell(config: ExperimentConfig, label: str, compressor: str, seed: int, out_dir) -> list[dict]:
    mode, _ = MODE_LABELS[label]
    dc = replace(config.distill, mode=mode, seed=seed, compressor=compressor)
    task = config.task
    codes = task.codes()
    model = ToyMLLM(config.model, seed=seed)
    run_dir = Path(out_dir) / "runs" / f"{label}__{compressor}__seed{seed}" if out_dir else None
    train_run(model, lambda rng: gen_batch(task, dc.batch_size, rng, *codes), dc, run_dir,
              schedule_overrides=config.schedule_overrides(label),
              extra_meta={"label": label, "config_hash": config.hash()})

    batch = eval_batch(config, seed)
    rows = []
    for ci, ec in enumerate(config.eval_compressors):
        for ri, ratio in enumerate(config.eval_ratios):
            rng = np.random.default_rng([seed, 31337, ci, ri])
            res = evaluate(model, ec, ratio, len(batch), rng, task, config.eval_layer, batch, seed,
                           n_pivots=config.distill.n_pivots)
            rows.append({"mode": label, "train_compressor": compressor, "seed": seed,
                         "eval_compressor": ec, "ratio": ratio, "retained": res.retained,
                         "n_samples": res.n_samples, "correct": res.correct, "accuracy": res.accuracy})
    log.info("cell %s/%s/seed%d done", label, compressor, seed)
    return rows


def _cell_job(args):
    return _run_cell(*args)


def run_matrix(config: ExperimentConfig, out_dir=None) -> list[dict]:
    """Train every (mode, train compressor, seed) cell and evaluate it on the grid.

    Writes ``results.csv`` (one row per evaluation) and ``summary.json`` (means
    and standard deviations over seeds) under ``out_dir``.
    """
    cells = sorted((m, c, s) for m in config.modes for c in config.train_compressors
                   for s in config.seeds)
    jobs = [(config, m, c, s, out_dir) for m, c, s in cells]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(_cell_job, jobs))
    else:
        chunks = [_cell_job(j) for j in jobs]
    h, version = config.hash(), f"v{__version__}"
    rows = [{"config_hash": h, "version": version, **r} for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r["mode"], r["train_compressor"], r["seed"], r["eval_compressor"],
                             r["ratio"]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results_csv(out / "results.csv", rows)
        (out / "summary.json").write_text(json.dumps(summarize(rows, config), indent=2,
                                                     sort_keys=True) + "\n")
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True,
                                                    default=str) + "\n")
    return rows


def write_results_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "ratio": f"{r['ratio']:.6f}", "accuracy": f"{r['accuracy']:.6f}"})


def summarize(rows: list[dict], config: ExperimentConfig) -> dict:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["mode"], r["train_compressor"], r["eval_compressor"], f"{r['ratio']:.6f}")
        groups.setdefault(key, []).append(r["accuracy"])
    cells = []
    for key in sorted(groups):
        acc = np.array(groups[key])
        cells.append({"mode": key[0], "train_compressor": key[1], "eval_compressor": key[2],
                      "ratio": float(key[3]), "n_seeds": len(acc), "mean_accuracy": float(acc.mean()),
                      "std_accuracy": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0})
    return {"config_hash": config.hash(), "version": f"v{__version__}", "cells": cells}
