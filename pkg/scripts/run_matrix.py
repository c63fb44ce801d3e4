"""Train the default experiment grid and print mean accuracy per cell.

    python scripts/run_matrix.py [--config configs/acceptance.cfg] [--out out/matrix] [--workers N]
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from progdistill.harness import ExperimentConfig, load_config, run_matrix, summarize


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("out/matrix"))
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, workers=args.workers)
    t0 = time.perf_counter()
    rows = run_matrix(cfg, args.out)
    print(f"{len(rows)} rows in {(time.perf_counter() - t0) / 60:.1f} min -> {args.out}")
    print(f"{'mode':<8}{'train':<12}{'eval':<12}{'ratio':>7}{'mean':>8}{'std':>8}")
    for c in summarize(rows, cfg)["cells"]:
        print(f"{c['mode']:<8}{c['train_compressor']:<12}{c['eval_compressor']:<12}"
              f"{c['ratio']:>7.3f}{c['mean_accuracy']:>8.4f}{c['std_accuracy']:>8.4f}")


if __name__ == "__main__":
    main()
