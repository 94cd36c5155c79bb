"""Colour regularization on/off: paired teachaugment runs per seed.

    python3 scripts/color_regularization.py --out runs/colour --seeds 0,1,2,3,4

For each seed trains lambda=10 and lambda=0, then reports the per-channel
colour distance between clean and colour-augmented test pixels, and writes a
before/after grid (with a colour scatter strip) for each run.
"""
import argparse
import os
from dataclasses import replace

from teachaug.cli import visualize
from teachaug.config import RunConfig
from teachaug.experiments import color_reg_pairs
from teachaug.trainer import CHECKPOINT_NAME


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/colour")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--n", type=int, default=12, help="images per grid")
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = replace(cfg, out=args.out)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    seeds = [int(s) for s in args.seeds.split(",")]
    dist = color_reg_pairs(cfg, seeds, weights=(10.0, 0.0))
    _, test_set = cfg.data.load()
    wins = 0
    for i, s in enumerate(seeds):
        a, b = dist[10.0][i], dist[0.0][i]
        wins += a < b
        print(f"seed {s}: colour distance lambda=10 {a:.5f}   lambda=0 {b:.5f}")
        for w in (10.0, 0.0):
            run_dir = os.path.join(args.out, f"lambda{w:g}", f"seed{s}")
            visualize(os.path.join(run_dir, CHECKPOINT_NAME), test_set.images[:args.n],
                      test_set.labels[:args.n], os.path.join(run_dir, "augmented.png"), seed=s)
    print(f"lambda=10 smaller in {wins}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
