"""Command line: train, gradcheck, visualize, compare, defaults.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or file
format error, 3 training aborted on a non-finite loss. ``TAUG_THREADS`` caps
the BLAS worker threads; it must be read before numpy is imported.
"""
from __future__ import annotations

import os

if os.environ.get("TAUG_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["TAUG_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402

import numpy as np  # noqa: E402

from . import checkpoint as ckpt_io  # noqa: E402
from .config import RunConfig  # noqa: E402
from .data import read_cifar_binary  # noqa: E402
from .errors import ConfigError, FormatError, NonFiniteError, StructureError  # noqa: E402
from .experiments import (  # noqa: E402
    COMPARE_KINDS, augment_with_checkpoint, compare, format_table, run_training, summarize,
)
from .imaging import image_grid, write_png  # noqa: E402
from .objective import channel_w1  # noqa: E402

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "dataset", None):
        cfg.data = replace(cfg.data, path=args.dataset)
    cfg.validate()
    return cfg


def _log_line(m: dict) -> None:
    print(f"epoch {m['epoch']:3d}  {m['objective']:>14s}  train_loss {m['train_loss']:.4f}  "
          f"test_acc {m.get('test_acc', float('nan')):.4f}  "
          f"teacher_ratio {m['teacher_ratio']:.3f}", flush=True)


# -- train ----------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_training(cfg, args.checkpoint, log=_log_line)
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    if args.config:
        _load_config(args)          # validates the file; the suite itself is fixed
    result = run_suite(range(args.seeds))
    for name, err in result.errors.items():
        flag = "ok" if err < result.tolerance else "FAIL"
        print(f"{name:28s} max rel err {err:.3e}  {flag}")
    if result.passed:
        print(f"all {len(result.errors)} paths < {result.tolerance:g} over {args.seeds} seeds")
        return EXIT_OK
    print("failing paths: " + ", ".join(result.failures))
    return EXIT_GRADCHECK


# -- visualize ------------------------------------------------------------------
def visualize(checkpoint: str, images: np.ndarray, labels: np.ndarray | None, out_png: str,
              seed: int = 0) -> dict:
    """Augment ``images`` with the checkpoint's live policy, write the grid,
    and return the report (mean |diff| and per-channel colour distance)."""
    if len(images) == 0:
        raise ConfigError("visualize needs at least one image (n = 0)")
    aug, colored = augment_with_checkpoint(checkpoint, images, labels, seed)
    zoom = max(1, 64 // images.shape[1])        # nearest-neighbour upscale of small tiles
    big = lambda a: a.repeat(zoom, axis=1).repeat(zoom, axis=2)  # noqa: E731
    write_png(out_png, image_grid(big(images), big(aug)))
    return {
        "n": int(len(images)),
        "mean_abs_diff": float(np.mean(np.abs(aug - images))),
        "color_distance": channel_w1(images, colored),
        "png": out_png,
    }


def cmd_visualize(args) -> int:
    cfg = _load_config(args)
    if not args.checkpoint:
        raise ConfigError("visualize needs --checkpoint")
    if args.n <= 0:
        raise ConfigError(f"empty grid: n must be positive, got {args.n}")
    if args.dataset:
        data = read_cifar_binary(args.dataset, cfg.data.num_classes)
    else:
        _, data = cfg.data.load()
    n = min(args.n, len(data))
    png = args.png or os.path.join(cfg.out, "augmented.png")
    report = visualize(args.checkpoint, data.images[:n], data.labels[:n], png, seed=args.seed or 0)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# -- compare --------------------------------------------------------------------
def cmd_compare(args) -> int:
    cfg = _load_config(args)
    kinds = tuple(args.kinds.split(",")) if args.kinds else COMPARE_KINDS
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (cfg.train.seed,)
    results = compare(cfg, kinds, seeds, args.jobs)
    rows = summarize(results)
    table = format_table(rows)
    print(table)
    ckpt_io.atomic_write(os.path.join(cfg.out, "compare.json"),
                         json.dumps(rows, indent=2, sort_keys=True) + "\n")
    ckpt_io.atomic_write(os.path.join(cfg.out, "compare.txt"), table + "\n")
    return EXIT_OK


# -- defaults -------------------------------------------------------------------
def cmd_defaults(args) -> int:
    sys.stdout.write(RunConfig().to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="teachaug", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="run config (JSON); defaults when omitted")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--dataset", help="binary dataset file instead of synthetic shapes")
        if out:
            sp.add_argument("--out", help="output directory (overrides the config)")

    sp = sub.add_parser("train", help="run the alternating optimization")
    common(sp)
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gradcheck", help="finite-difference suite over all differentiable paths")
    sp.add_argument("--config")
    sp.add_argument("--seeds", type=int, default=10, help="number of seeds per path")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("visualize", help="PNG grid of originals vs augmented + colour scatter")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint holding the policy")
    sp.add_argument("--n", type=int, default=16, help="number of images")
    sp.add_argument("--png", help="output PNG path (default: <out>/augmented.png)")
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("compare", help="train several objective kinds and tabulate")
    common(sp)
    sp.add_argument("--kinds", help="comma-separated objective kinds (default: all four)")
    sp.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("defaults", help="print the default run config")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        _err(f"{exc}; last good checkpoint kept")
        return EXIT_NONFINITE
    except (ConfigError, FormatError, StructureError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
