"""Toy objective comparison: four policy objectives x several seeds on the shapes data.

    python3 scripts/compare_objectives.py --out runs/compare --seeds 0,1,2,3,4

Writes one run directory per (kind, seed), then prints the summary table and
the per-epoch teacher loss ratios of every run.
"""
import argparse
import json
import os
import time
from dataclasses import replace

from teachaug.config import RunConfig
from teachaug.experiments import COMPARE_KINDS, compare, format_table, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config JSON (default: built-in defaults)")
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--kinds", default=",".join(COMPARE_KINDS))
    ap.add_argument("--epochs", type=int, help="override the epoch budget")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = replace(cfg, out=args.out)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.perf_counter()
    results = compare(cfg, args.kinds.split(","), seeds, args.jobs)
    rows = summarize(results)
    print(format_table(rows))
    print(f"\n{len(seeds) * len(results)} runs in {(time.perf_counter() - t0) / 60:.1f} min")
    for kind, hists in results.items():
        for seed, h in zip(seeds, hists):
            ratios = " ".join(f"{m['teacher_ratio']:.2f}" for m in h)
            print(f"{kind:14s} seed {seed}: ratio by epoch {ratios}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
