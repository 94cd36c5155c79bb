"""Multi-run experiments: the objective comparison and the colour-regularization
pairing. Used by the CLI, the scripts in ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from . import checkpoint as ckpt_io
from .augment import ImageBatch, augment
from .config import RunConfig
from .errors import ConfigError
from .numerics import no_grad
from .objective import channel_w1
from .trainer import CHECKPOINT_NAME, TrainRun, train

COMPARE_KINDS = ("adv_aa", "baseline_none", "pointaugment", "teachaugment")


def run_training(cfg: RunConfig, resume: str | None = None, log=None) -> list[dict]:
    """Train ``cfg`` (optionally resuming from a checkpoint file) into ``cfg.out``."""
    train_set, test_set = cfg.data.load()
    if resume:
        run = TrainRun.from_checkpoint(ckpt_io.load(resume))
        # the config given for the resumed run sets the epoch budget
        run.cfg = replace(run.cfg, epochs=cfg.train.epochs)
    else:
        run = TrainRun(cfg.train, train_set.num_classes, train_set.images.shape[1:3])
    if tuple(run.image_hw) != tuple(train_set.images.shape[1:3]):
        raise ConfigError(f"checkpoint expects {run.image_hw} images, dataset has "
                          f"{train_set.images.shape[1:3]}")
    return train(run, train_set, test_set, out_dir=cfg.out, epochs=cfg.train.epochs, log=log)


def augment_with_checkpoint(path: str, images: np.ndarray, labels: np.ndarray | None,
                            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(fully augmented, colour stage only) images under the checkpoint's live policy."""
    run = TrainRun.from_checkpoint(ckpt_io.load(path))
    onehot = None if labels is None else np.eye(run.num_classes)[labels]
    batch = ImageBatch(images.astype(run.dtype), onehot)
    with no_grad():
        out, trace = augment(run.policy, batch, np.random.default_rng(seed))
    return np.clip(out.data, 0, 1), trace.color_out.data


def color_distance(path: str, images: np.ndarray, labels: np.ndarray | None,
                   seed: int = 0) -> float:
    """Per-channel W1 between clean and colour-augmented pixel distributions."""
    _, colored = augment_with_checkpoint(path, images, labels, seed)
    return channel_w1(images, colored)


# -- objective comparison -------------------------------------------------------------
def _one(job) -> tuple[str, int, list[dict]]:
    cfg, kind, seed = job
    run_cfg = replace(cfg, train=replace(cfg.train, objective=kind, seed=seed),
                      out=os.path.join(cfg.out, kind, f"seed{seed}"))
    return kind, seed, run_training(run_cfg)


def compare(cfg: RunConfig, kinds=COMPARE_KINDS, seeds=(0,), jobs: int = 1) -> dict:
    """Train every (kind, seed) pair into ``<out>/<kind>/seed<s>``; histories by kind."""
    for k in kinds:
        replace(cfg.train, objective=k).validate()
    work = [(cfg, k, s) for k in sorted(kinds) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            done = list(pool.map(_one, work))
    else:
        done = [_one(w) for w in work]
    results: dict[str, list] = {k: [] for k in sorted(kinds)}
    for kind, _, hist in done:
        results[kind].append(hist)
    return results


def summarize(results: dict, after_epoch: int = 5) -> list[dict]:
    """One row per kind (sorted by name): mean final test accuracy, plus the final
    and the worst post-``after_epoch`` teacher loss ratio, averaged over seeds."""
    rows = []
    for kind in sorted(results):
        hists = results[kind]
        final = [h[-1] for h in hists]
        late = [max((m["teacher_ratio"] for m in h if m["epoch"] > after_epoch), default=np.nan)
                for h in hists]
        rows.append({
            "kind": kind,
            "seeds": len(hists),
            "test_acc": float(np.mean([m["test_acc"] for m in final])),
            "test_acc_per_seed": [m["test_acc"] for m in final],
            "final_teacher_ratio": float(np.mean([m["teacher_ratio"] for m in final])),
            "max_teacher_ratio_after": float(np.mean(late)),
        })
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'kind':15s} {'seeds':>5s} {'test_acc':>9s} {'ratio_final':>12s} {'ratio_max>5':>12s}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['kind']:15s} {r['seeds']:5d} {r['test_acc']:9.4f} "
                     f"{r['final_teacher_ratio']:12.3f} {r['max_teacher_ratio_after']:12.3f}")
    return "\n".join(lines)


# -- colour regularization pairing -----------------------------------------------------
def color_reg_pairs(cfg: RunConfig, seeds=(0,), weights=(10.0, 0.0), reuse: bool = True) -> dict:
    """Train teachaugment with each colour weight per seed and measure the
    colour distance of the final policy on the test images.

    Runs go to ``<out>/lambda<w>/seed<s>``. With ``reuse``, a run whose
    checkpoint was trained with the same train config to the full budget is
    not retrained (the dataset settings are not part of that check).
    Returns {weight: [distance per seed]}.
    """
    _, test_set = cfg.data.load()
    out: dict[float, list[float]] = {w: [] for w in weights}
    for w in weights:
        for s in seeds:
            run_cfg = replace(cfg, train=replace(cfg.train, objective="teachaugment",
                                                 color_reg=w, seed=s),
                              out=os.path.join(cfg.out, f"lambda{w:g}", f"seed{s}"))
            path = os.path.join(run_cfg.out, CHECKPOINT_NAME)
            if not (reuse and _finished(path, run_cfg.train)):
                run_training(run_cfg)
            out[w].append(color_distance(path, test_set.images, test_set.labels, seed=s))
    return out


def _finished(path: str, train_cfg) -> bool:
    """A checkpoint at ``path`` trained with exactly ``train_cfg`` to its budget."""
    if not os.path.exists(path):
        return False
    saved = ckpt_io.load(path)
    same = saved.blob.get("config") == json.loads(json.dumps(asdict(train_cfg)))
    return same and saved.counters.get("epoch", -1) >= train_cfg.epochs
