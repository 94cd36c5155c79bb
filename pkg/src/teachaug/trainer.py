"""The alternating optimization: target steps with replayed augmentation, policy steps
on fresh batches, an EMA (or frozen) teacher, metrics and checkpoints."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint as ckpt_io
from .augment import AugmentationPolicy, ImageBatch, augment
from .data import Dataset, batch_indices
from .errors import ConfigError, NonFiniteError
from .numerics import Conv2d, Linear, Module, Optimizer, RngStreams, Tensor, no_grad, ops
from .objective import (
    OBJECTIVE_KINDS, ObjectiveConfig, consistency_objective, cross_entropy,
    policy_objective_adv_aa, policy_objective_pointaugment, policy_objective_teachaugment,
    target_objective,
)
from .replay import ReplayBuffer
from .teacher import TeacherState, ema_update, teacher_forward

LEARNED_KINDS = ("teachaugment", "adv_aa", "pointaugment")


class TargetModel(Module):
    """conv(3->32) -> pool -> conv(32->64) -> pool -> fc(128) -> fc(K), leaky-ReLU 0.2."""

    def __init__(self, num_classes: int, height: int, width: int, rng: np.random.Generator,
                 dtype=np.float32, channels=(32, 64), hidden: int = 128):
        if height % 4 or width % 4:
            raise ConfigError(f"image size {height}x{width} must be divisible by 4")
        c1, c2 = channels
        self.conv1 = Conv2d(3, c1, 3, rng, dtype)
        self.conv2 = Conv2d(c1, c2, 3, rng, dtype)
        self.fc1 = Linear(c2 * (height // 4) * (width // 4), hidden, rng, dtype)
        self.fc2 = Linear(hidden, num_classes, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.maxpool2d(ops.leaky_relu(self.conv1(x), 0.2))
        h = ops.maxpool2d(ops.leaky_relu(self.conv2(h), 0.2))
        h = ops.reshape(h, (h.shape[0], -1))
        return self.fc2(ops.leaky_relu(self.fc1(h), 0.2))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    n_inner: int = 5
    objective: str = "teachaugment"
    smoothing: float = 0.1
    color_reg: float = 10.0
    swd_projections: int = 16
    teacher: str = "ema"
    teacher_checkpoint: str = ""
    ema_decay: float = 0.999
    replay_gamma: float = 0.99
    n_buffer: int = 10
    temperature: float = 0.05
    c_scale: float = 0.8
    g_scale: float = 0.5
    noise_dim: int = 128
    rgb_hidden: int = 32
    noise_hidden: int = 512
    geo_hidden: int = 512
    drop_ratio: float = 0.8
    use_context: bool = True
    lr_target: float = 0.01
    momentum: float = 0.9
    wd_target: float = 5e-4
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    lr_policy: float = 1e-3
    wd_policy: float = 1e-2
    base_augment: bool = True
    crop_padding: int = 2
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.objective not in OBJECTIVE_KINDS:
            raise ConfigError(f"objective must be one of {OBJECTIVE_KINDS}, got {self.objective!r}")
        if self.epochs < 0 or self.n_inner < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 0, n_inner >= 1 and batch_size >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.teacher == "pretrained" and not self.teacher_checkpoint:
            raise ConfigError("a pretrained teacher needs teacher_checkpoint")
        if self.lr_target < 0 or self.lr_policy < 0:
            raise ConfigError("learning rates must be non-negative")
        self.objective_config()     # range checks on smoothing / color_reg
        TeacherState("ema", Module(), self.ema_decay)
        ReplayBuffer(self.replay_gamma, self.n_buffer)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.smoothing, self.color_reg, self.swd_projections, self.objective)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        d = dict(d)
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


@dataclass
class EpochStats:
    """Running sums for one epoch's metrics."""

    sums: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, key: str, value: float, weight: int = 1) -> None:
        self.sums[key] = self.sums.get(key, 0.0) + float(value) * weight
        self.counts[key] = self.counts.get(key, 0) + weight

    def mean(self, key: str) -> float:
        return self.sums[key] / self.counts[key] if self.counts.get(key) else float("nan")


def evaluate(model, data: Dataset, batch_size: int = 250, dtype=np.float32) -> tuple[float, float]:
    """Accuracy and mean cross-entropy of ``model`` over ``data``, no augmentation."""
    if len(data) == 0:
        return float("nan"), float("nan")
    if isinstance(model, Module):
        model.eval()
    correct = 0
    loss = 0.0
    with no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            logits = model(Tensor(data.images[sl].astype(dtype)))
            y = data.onehot(sl)
            correct += int(np.sum(logits.data.argmax(axis=1) == data.labels[sl]))
            loss += cross_entropy(logits, y).item() * len(y)
    return correct / len(data), loss / len(data)


def base_augment(pixels: np.ndarray, rng: np.random.Generator, padding: int) -> np.ndarray:
    """Random horizontal flip, then a random crop from a zero-padded frame."""
    b, h, w, _ = pixels.shape
    out = np.where(rng.random(b)[:, None, None, None] < 0.5, pixels[:, :, ::-1], pixels)
    if padding:
        padded = np.pad(out, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        oy = rng.integers(0, 2 * padding + 1, b)
        ox = rng.integers(0, 2 * padding + 1, b)
        rows = oy[:, None] + np.arange(h)[None]            # [B, H]
        cols = ox[:, None] + np.arange(w)[None]            # [B, W]
        out = padded[np.arange(b)[:, None, None], rows[:, :, None], cols[:, None, :]]
    return np.ascontiguousarray(out)


class TrainRun:
    """Config plus all mutable training state."""

    def __init__(self, cfg: TrainConfig, num_classes: int, image_hw: tuple[int, int]):
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        self.image_hw = tuple(image_hw)
        self.dtype = np.dtype(cfg.dtype)
        self.streams = RngStreams(cfg.seed)
        self.target = TargetModel(num_classes, *image_hw, self.streams.fresh("init.target"),
                                  self.dtype)
        self.policy = AugmentationPolicy(
            self.streams.fresh("init.policy"), context_dim=num_classes if cfg.use_context else 0,
            noise_dim=cfg.noise_dim, temperature=cfg.temperature, c_scale=cfg.c_scale,
            g_scale=cfg.g_scale, drop_ratio=cfg.drop_ratio, rgb_hidden=cfg.rgb_hidden,
            noise_hidden=cfg.noise_hidden, geo_hidden=cfg.geo_hidden, dtype=self.dtype)
        if cfg.teacher == "pretrained":
            saved = ckpt_io.load(cfg.teacher_checkpoint)
            self.teacher = TeacherState.pretrained(self.target, saved.with_prefix("target."),
                                                   source=cfg.teacher_checkpoint)
        elif cfg.teacher == "ema":
            self.teacher = TeacherState.ema(self.target, cfg.ema_decay)
        else:
            raise ConfigError(f"teacher must be 'ema' or 'pretrained', got {cfg.teacher!r}")
        self.buffer = ReplayBuffer(cfg.replay_gamma, cfg.n_buffer)
        self.opt_target = Optimizer.sgd(self.target.named_parameters(), cfg.lr_target,
                                        momentum=cfg.momentum, weight_decay=cfg.wd_target)
        self.opt_policy = Optimizer.adamw(self.policy.named_parameters(), cfg.lr_policy,
                                          cfg.wd_policy)
        self.obj_cfg = cfg.objective_config()
        self.epoch = 0
        self.inner_steps = 0
        self.policy_steps = 0
        self.stats = EpochStats()

    # -- helpers ----------------------------------------------------------
    @property
    def learned(self) -> bool:
        return self.cfg.objective in LEARNED_KINDS

    def _batch(self, data: Dataset, idx: np.ndarray, rng: np.random.Generator) -> ImageBatch:
        px = data.images[idx]
        if self.cfg.base_augment:
            px = base_augment(px, rng, self.cfg.crop_padding)
        return ImageBatch(px.astype(self.dtype, copy=False), data.onehot(idx))

    def _check(self, value: Tensor, what: str) -> None:
        if not np.isfinite(value.data).all():
            raise NonFiniteError(f"non-finite {what} at epoch {self.epoch + 1}, "
                                 f"inner step {self.inner_steps}")

    def current_lr(self) -> float:
        drops = sum(1 for m in self.cfg.lr_milestones if self.epoch >= m)
        return self.cfg.lr_target * self.cfg.lr_gamma ** drops

    # -- Alg. 1 inner loop ------------------------------------------------
    def inner_step(self, batch: ImageBatch) -> float:
        """EMA update, replay-sampled augmentation, one descent step on theta."""
        cfg = self.cfg
        if self.teacher.kind == "ema":
            ema_update(self.teacher, self.target)
        x = Tensor(batch.pixels)
        if self.learned:
            pol = self.buffer.sample(self.streams.stream("replay"), live=self.policy)
            with no_grad():
                x, _ = augment(pol, batch, self.streams.stream("inner_aug"))
            x = Tensor(x.data)
        self.target.train()
        self.opt_target.zero_grad()
        logits = self.target(x)
        if cfg.objective in ("consistency_mse", "consistency_kld"):
            t_logits = teacher_forward(self.teacher, Tensor(batch.pixels))
            loss = consistency_objective(logits, t_logits, batch.labels, cfg.objective.split("_")[1])
        else:
            loss = target_objective(logits, batch.labels)
        self._check(loss, "target loss")
        loss.backward()
        self.opt_target.state.lr = self.current_lr()
        self.opt_target.step()
        self.inner_steps += 1
        self.stats.add("train_loss", loss.item())
        self.stats.add("train_acc", np.mean(logits.data.argmax(1) == batch.labels.argmax(1)))
        return loss.item()

    # -- Alg. 1 policy update ---------------------------------------------
    def policy_objective(self, batch: ImageBatch, rng: np.random.Generator,
                         clean_logits: Tensor | None = None):
        """Scalar the policy optimizer descends, plus the trace and logits.

        Maximized objectives are negated here; pointaugment is already a
        minimization. ``clean_logits`` (target on the un-augmented batch) is
        computed on demand when not supplied.
        """
        kind = self.cfg.objective
        x_hat, trace = augment(self.policy, batch, rng)
        t_logits = self.target(x_hat)
        teach = teacher_forward(self.teacher, x_hat)
        if kind == "teachaugment":
            value = policy_objective_teachaugment(t_logits, teach, batch.labels, batch.pixels,
                                                  trace.color_out, self.obj_cfg, rng)
            descend = -value
        elif kind == "adv_aa":
            descend = -policy_objective_adv_aa(t_logits, batch.labels)
        elif kind == "pointaugment":
            if clean_logits is None:
                with no_grad():
                    clean_logits = self.target(Tensor(batch.pixels))
            descend = policy_objective_pointaugment(t_logits, clean_logits, batch.labels)
        else:
            descend = None
        return descend, trace, t_logits, teach

    def policy_step(self, batch: ImageBatch) -> None:
        """One update of phi on a fresh batch (metrics-only probe for frozen kinds)."""
        rng = self.streams.stream("policy_aug")
        self.target.requires_grad_(False)
        self.target.eval()
        try:
            with no_grad():
                clean = Tensor(batch.pixels)
                teach_clean = teacher_forward(self.teacher, clean)
                targ_clean = self.target(clean)
            if self.learned:
                self.opt_policy.zero_grad()
                descend, trace, t_logits, teach = self.policy_objective(batch, rng, targ_clean)
                self._check(descend, "policy objective")
                descend.backward()
                self.opt_policy.step()
                self.policy_steps += 1
            else:
                with no_grad():
                    _, trace, t_logits, teach = self.policy_objective(batch, rng, targ_clean)
        finally:
            self.target.requires_grad_(True)
        y = batch.labels
        self.stats.add("teacher_loss_aug", cross_entropy(Tensor(teach.data), y).item())
        self.stats.add("teacher_loss_clean", cross_entropy(teach_clean, y).item())
        self.stats.add("target_loss_aug", cross_entropy(Tensor(t_logits.data), y).item())
        self.stats.add("target_loss_clean", cross_entropy(targ_clean, y).item())
        for k, v in trace.summary().items():
            self.stats.add(k, v)

    # -- outer loop -------------------------------------------------------
    def run_epoch(self, train: Dataset, test: Dataset | None = None) -> dict:
        cfg = self.cfg
        self.stats = EpochStats()
        batch_rng = self.streams.stream("base_aug")
        fresh_rng = self.streams.stream("policy_batch")
        for idx in batch_indices(len(train), cfg.batch_size, cfg.seed, self.epoch):
            self.inner_step(self._batch(train, idx, batch_rng))
            if self.inner_steps % cfg.n_inner == 0:
                fresh = fresh_rng.choice(len(train), size=cfg.batch_size, replace=False)
                self.policy_step(self._batch(train, fresh, fresh_rng))
        self.epoch += 1
        if self.learned and self.buffer.due(self.epoch):
            self.buffer.store(self.policy)
        return self.epoch_metrics(test)

    def epoch_metrics(self, test: Dataset | None) -> dict:
        s = self.stats
        p_c, p_g = self.policy.gate_probabilities()
        ratio = s.mean("teacher_loss_aug") / s.mean("teacher_loss_clean")
        out = {
            "epoch": self.epoch,
            "objective": self.cfg.objective,
            "train_loss": s.mean("train_loss"),
            "train_acc": s.mean("train_acc"),
            "target_loss_clean": s.mean("target_loss_clean"),
            "target_loss_aug": s.mean("target_loss_aug"),
            "teacher_loss_clean": s.mean("teacher_loss_clean"),
            "teacher_loss_aug": s.mean("teacher_loss_aug"),
            "teacher_ratio": ratio,
            "mean_abs_A": s.mean("mean_abs_A"),
            "mean_abs_alpha_minus_1": s.mean("mean_abs_alpha_minus_1"),
            "mean_abs_beta": s.mean("mean_abs_beta"),
            "p_c": p_c,
            "p_g": p_g,
            "inner_steps": self.inner_steps,
            "policy_steps": self.policy_steps,
            "replay_size": len(self.buffer),
        }
        if test is not None:
            out["test_acc"], out["test_loss"] = evaluate(self.target, test, dtype=self.dtype)
        return out

    # -- checkpoints ------------------------------------------------------
    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        t: dict[str, np.ndarray] = {}
        for prefix, mod in (("target.", self.target), ("policy.", self.policy),
                            ("teacher.", self.teacher.model)):
            for name, p in mod.named_parameters():
                t[prefix + name] = p.data
        for i, snap in enumerate(self.buffer.snapshots):
            for name, p in snap.named_parameters():
                t[f"replay.{i}.{name}"] = p.data
        for prefix, opt in (("opt_target.", self.opt_target), ("opt_policy.", self.opt_policy)):
            for name, arr in opt.state.buffers.items():
                t[prefix + name] = arr
        blob = {
            "rng": self.streams.get_state(),
            "config": _jsonable(asdict(self.cfg)),
            "num_classes": self.num_classes,
            "image_hw": list(self.image_hw),
        }
        counters = {
            "epoch": self.epoch,
            "inner_steps": self.inner_steps,
            "policy_steps": self.policy_steps,
            "replay_size": len(self.buffer),
            "opt_target.step": self.opt_target.state.step_count,
            "opt_policy.step": self.opt_policy.state.step_count,
        }
        return ckpt_io.Checkpoint(t, blob, counters)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> TrainRun:
        cfg = TrainConfig.from_dict(ck.blob["config"])
        run = cls(cfg, ck.blob["num_classes"], tuple(ck.blob["image_hw"]))
        run.load_state(ck)
        return run

    def load_state(self, ck: ckpt_io.Checkpoint) -> None:
        self.target.load_state_dict(ck.with_prefix("target."))
        self.policy.load_state_dict(ck.with_prefix("policy."))
        self.teacher.model.load_state_dict(ck.with_prefix("teacher."))
        self.buffer.snapshots = []
        for i in range(ck.counters["replay_size"]):
            snap = self.policy.clone()
            snap.load_state_dict(ck.with_prefix(f"replay.{i}."))
            self.buffer.snapshots.append(snap)
        for prefix, opt in (("opt_target.", self.opt_target), ("opt_policy.", self.opt_policy)):
            opt.state.buffers = {k: v.copy() for k, v in ck.with_prefix(prefix).items()}
            opt.state.step_count = ck.counters[prefix + "step"]
        self.streams.set_state(ck.blob["rng"])
        self.epoch = ck.counters["epoch"]
        self.inner_steps = ck.counters["inner_steps"]
        self.policy_steps = ck.counters["policy_steps"]


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


CHECKPOINT_NAME = "checkpoint.taug"
METRICS_NAME = "metrics.jsonl"


def train(run: TrainRun, train_set: Dataset, test_set: Dataset | None = None,
          out_dir: str | None = None, epochs: int | None = None, log=None) -> list[dict]:
    """Run until ``epochs`` (default: the configured budget) have completed.

    Writes the checkpoint after every epoch (and once before the first), and
    appends one JSON line per epoch to the metrics file. A non-finite loss
    raises ``NonFiniteError`` and leaves the last good checkpoint on disk.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if len(train_set) < run.cfg.batch_size:
        raise ConfigError(f"batch size {run.cfg.batch_size} exceeds {len(train_set)} samples")
    total = run.cfg.epochs if epochs is None else epochs
    history = []
    lines: list[str] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        lines = _read_metrics_lines(os.path.join(out_dir, METRICS_NAME), run.epoch)
        if run.epoch == 0:
            ckpt_io.save(os.path.join(out_dir, CHECKPOINT_NAME), run.to_checkpoint())
    while run.epoch < total:
        metrics = run.run_epoch(train_set, test_set)
        history.append(metrics)
        if out_dir is not None:
            # metrics first, then the checkpoint: a crash in between is undone
            # on resume by dropping lines past the checkpoint's epoch
            lines.append(json.dumps(metrics, sort_keys=True) + "\n")
            ckpt_io.atomic_write(os.path.join(out_dir, METRICS_NAME), "".join(lines).encode())
            ckpt_io.save(os.path.join(out_dir, CHECKPOINT_NAME), run.to_checkpoint())
        if log is not None:
            log(metrics)
    return history


def _read_metrics_lines(path: str, upto_epoch: int) -> list[str]:
    """Existing metric lines for epochs <= ``upto_epoch`` (resume support)."""
    if upto_epoch == 0 or not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [ln for ln in fh if ln.strip() and json.loads(ln)["epoch"] <= upto_epoch]
