"""Command-line entry point: ``python -m progdistill <command>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import effmodel, scalarlab
from .harness import (MODE_LABELS, ExperimentConfig, eval_batch, evaluate, load_config,
                      run_matrix)
from .model import ToyMLLM
from .task import gen_batch

log = logging.getLogger("progdistill")


def _ratios(text: str) -> list[float]:
    from .harness import _parse_scalar
    return [float(_parse_scalar(t)) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _global(p: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", type=Path, help="flat key = value config file", **kw)
    p.add_argument("--seed", type=int, help="override the seed list with one seed", **kw)
    p.add_argument("--out", type=Path, help="output directory", **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progdistill", description=__doc__)
    _global(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and evaluate it")
    _global(t, suppress=True)
    t.add_argument("--mode", choices=sorted(MODE_LABELS), default=None)
    t.add_argument("--compressor", default=None, help="training compressor")
    t.add_argument("--steps", type=int, default=None)

    m = sub.add_parser("matrix", help="full experiment grid")
    _global(m, suppress=True)
    m.add_argument("--workers", type=int, default=None)

    s = sub.add_parser("scalar-lab", help="check the scalar path-length bound")
    _global(s, suppress=True)
    s.add_argument("--center", choices=sorted(scalarlab.CENTERS), default="quad")
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--r-max", type=float, default=0.9)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--lag", choices=("clamp", "extend"), default=None,
                   help="lagged center outside [0, r_max]; default extend for affine, else clamp")

    e = sub.add_parser("efficiency", help="prefill FLOPs and KV-cache table")
    _global(e, suppress=True)
    e.add_argument("--preset", choices=sorted(effmodel.PRESETS), default="7b-class")
    e.add_argument("--retained", type=_ints, default=[576, 128, 64])
    e.add_argument("--visual", type=int, default=576)
    e.add_argument("--text", type=int, default=None, help="text tokens; default fitted for 7b-class")
    e.add_argument("--layer", type=int, default=2)

    c = sub.add_parser("selfcheck", help="gradient and invariant suites")
    _global(c, suppress=True)
    c.add_argument("--instances", type=int, default=50)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    label = args.mode or cfg.modes[0]
    mode, _ = MODE_LABELS[label]
    dc = replace(cfg.distill, mode=mode, seed=cfg.seeds[0],
                 compressor=args.compressor or cfg.train_compressors[0],
                 steps=args.steps if args.steps is not None else cfg.distill.steps)
    from .distill import train_run
    task, codes = cfg.task, cfg.task.codes()
    model = ToyMLLM(cfg.model, seed=dc.seed)
    t0 = time.perf_counter()
    art = train_run(model, lambda rng: gen_batch(task, dc.batch_size, rng, *codes), dc, args.out,
                    schedule_overrides=cfg.schedule_overrides(label),
                    extra_meta={"label": label, "config_hash": cfg.hash()})
    log.info("trained %d steps in %.1fs", dc.steps, time.perf_counter() - t0)
    batch = eval_batch(cfg, dc.seed)
    print(f"{'compressor':<12}{'ratio':>8}{'kept':>6}{'accuracy':>10}")
    for ec in cfg.eval_compressors:
        for ratio in cfg.eval_ratios:
            r = evaluate(model, ec, ratio, len(batch), np.random.default_rng([dc.seed, 1]), task,
                         cfg.eval_layer, batch, dc.seed, n_pivots=dc.n_pivots)
            print(f"{ec:<12}{ratio:>8.4f}{r.retained:>6d}{r.accuracy:>10.4f}")
    print(f"final loss_total={art.records[-1].loss_total:.6f}")
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    out = args.out or Path("out/matrix")
    rows = run_matrix(cfg, out)
    print(f"{len(rows)} result rows written to {out / 'results.csv'}")
    return 0


def cmd_scalar_lab(args) -> int:
    lag = args.lag or ("extend" if args.center == "affine" else "clamp")
    prob = scalarlab.ScalarProblem.uniform(scalarlab.CENTERS[args.center](), args.lam, args.delta,
                                           args.r_max, args.steps, lag=lag)
    rep = scalarlab.verify_theorem(prob)
    print(json.dumps(rep.summary(), indent=2, sort_keys=True))
    print(f"bound_holds={str(rep.bound_holds).lower()}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        r = prob.schedule
        with open(args.out / "scalar_paths.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "theta_direct", "theta_progressive"])
            for ri, d, q in zip(r, scalarlab.minimizer_direct(prob, r),
                                scalarlab.minimizer_progressive(prob, r)):
                w.writerow([f"{ri:.6f}", f"{d:.12g}", f"{q:.12g}"])
    return 0 if rep.bound_holds else 1


def cmd_efficiency(args) -> int:
    arch = effmodel.PRESETS[args.preset]
    text = args.text
    if text is None:
        text = effmodel.fit_text_tokens(arch, args.visual, args.layer) if args.preset == "7b-class" else 3
    rows = effmodel.sweep_tokens(arch, args.retained, args.visual, text, args.layer)
    full = effmodel.prefill_flops(arch, effmodel.WorkloadSpec(args.visual, text, args.layer))
    print(f"preset={args.preset} text_tokens={text} layer={args.layer}")
    print(f"{'tokens':>7}{'TFLOPs':>10}{'KV MB':>10}{'FLOPs cut':>11}")
    for r in sorted(rows, key=lambda r: -r.tokens):
        print(f"{r.tokens:>7d}{r.flops / 1e12:>10.3f}{r.kv_bytes / 1e6:>10.1f}"
              f"{effmodel.reduction(full, r.flops):>10.1%}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        effmodel.write_sweep_csv(args.out / "efficiency.csv", rows)
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all
    ok = True
    for name, passed, detail in run_all(instances=args.instances):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return 0 if ok else 1


COMMANDS = {"train": cmd_train, "matrix": cmd_matrix, "scalar-lab": cmd_scalar_lab,
            "efficiency": cmd_efficiency, "selfcheck": cmd_selfcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, scalarlab.AssumptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
