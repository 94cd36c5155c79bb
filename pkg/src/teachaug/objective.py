"""Loss functions for the target update, the policy update and the baselines.

All prediction arguments are *logits*; probabilities are formed inside with
log-sum-exp so that log f and log(1 - f) stay finite for confident models.
Policy objectives return the scalar the policy optimizer works on; the
docstring of each says whether it is maximized or minimized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Tensor, ops

OBJECTIVE_KINDS = ("teachaugment", "adv_aa", "pointaugment", "consistency_mse",
                   "consistency_kld", "baseline_none")


@dataclass
class ObjectiveConfig:
    smoothing: float = 0.0
    color_reg: float = 10.0
    swd_projections: int = 16
    kind: str = "teachaugment"

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.color_reg < 0:
            raise ConfigError("color_reg must be non-negative")
        if self.swd_projections < 1:
            raise ConfigError("swd_projections must be a positive integer")
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}; choose from {OBJECTIVE_KINDS}")


def smooth_labels(y: np.ndarray, eps: float) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"smoothing must lie in [0, 1), got {eps}")
    y = np.asarray(y, dtype=np.float64)
    return (1.0 - eps) * y + eps / y.shape[-1]


def cross_entropy(logits: Tensor, y) -> Tensor:
    return ops.softmax_cross_entropy(logits, y)


def _per_sample_ce(logits: Tensor, y: np.ndarray) -> Tensor:
    return ops.neg(ops.sum(ops.log_softmax(logits) * y.astype(logits.dtype), axis=-1))


def non_saturating_loss(logits: Tensor, y_smoothed) -> Tensor:
    """Batch mean of sum_k y_k log(1 - f_k); the policy *maximizes* this."""
    y = np.asarray(y_smoothed, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"labels {y.shape} vs logits {logits.shape}")
    per = ops.sum(ops.log1m_softmax(logits) * y, axis=-1)
    return ops.mean(per)


# ---------------------------------------------------------------------------
# sliced Wasserstein distance
# ---------------------------------------------------------------------------
def random_directions(rng: np.random.Generator, shape: tuple[int, ...], dim: int) -> np.ndarray:
    d = rng.standard_normal((*shape, dim))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def sliced_w1(a: Tensor, b: Tensor, directions: np.ndarray) -> Tensor:
    """Per-group sliced W1 for stacked point sets.

    a, b: [G, n, d]; directions: [G, P, d] unit vectors. Returns [G]: for each
    group the mean over directions of mean_i |sort(a u)_i - sort(b u)_i|.
    """
    if a.shape != b.shape:
        raise DimensionError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    dirs_t = np.swapaxes(directions, -1, -2).astype(a.dtype)   # [G, d, P]
    pa = ops.matmul(a, dirs_t)                                  # [G, n, P]
    pb = ops.matmul(b, dirs_t)
    return ops.mean(ops.abs(_sorted(pa) - _sorted(pb)), axis=(1, 2))


def _sorted(p: Tensor) -> Tensor:
    # ties carry equal values, so any deterministic order gives the same distance
    if not p.requires_grad:
        return Tensor(np.sort(p.data, axis=1))
    return ops.take_along_axis(p, np.argsort(p.data, axis=1), axis=1)


def swd(set_a, set_b, n_proj: int, rng: np.random.Generator | None = None,
        directions: np.ndarray | None = None) -> Tensor:
    """Sliced Wasserstein-1 distance between two equal-size point clouds [n, d]."""
    a = set_a if isinstance(set_a, Tensor) else Tensor(np.asarray(set_a, dtype=np.float64))
    b = set_b if isinstance(set_b, Tensor) else Tensor(np.asarray(set_b, dtype=a.dtype))
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"swd needs two [n, d] sets of equal size, got {a.shape}, {b.shape}")
    if directions is None:
        directions = random_directions(rng, (n_proj,), a.shape[1])
    out = sliced_w1(ops.reshape(a, (1, *a.shape)), ops.reshape(b, (1, *b.shape)),
                    directions.reshape(1, -1, a.shape[1]))
    return ops.reshape(out, ())


def color_regularization(before, after: Tensor, n_proj: int,
                         rng: np.random.Generator) -> Tensor:
    """Sum over pixel positions of the SWD between the batch's colours there.

    ``before`` and ``after`` are [B, H, W, 3]; each position contributes one
    B-point, 3-D distribution pair.
    """
    x0 = before if isinstance(before, Tensor) else Tensor(np.asarray(before, dtype=after.dtype))
    if x0.shape != after.shape:
        raise DimensionError(f"before {x0.shape} and after {after.shape} differ")
    b, h, w, c = after.shape
    if b < 2:
        raise ConfigError("colour regularization needs a batch of at least two images")
    ga = ops.transpose(ops.reshape(x0, (b, h * w, c)), (1, 0, 2))      # [M, B, 3]
    gb = ops.transpose(ops.reshape(after, (b, h * w, c)), (1, 0, 2))
    dirs = random_directions(rng, (h * w, n_proj), c)
    return ops.sum(sliced_w1(ga, gb, dirs))


def channel_w1(before: np.ndarray, after: np.ndarray) -> float:
    """Mean over RGB channels of the 1-D Wasserstein-1 distance between the
    pooled pixel values before and after (an axis-aligned sliced distance)."""
    a = np.asarray(before, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(after, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise DimensionError(f"pixel sets differ in size: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(np.sort(a, axis=0) - np.sort(b, axis=0))))


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------
def target_objective(target_logits: Tensor, y) -> Tensor:
    """Plain cross-entropy, minimized by the target model."""
    return cross_entropy(target_logits, y)


def policy_objective_teachaugment(target_logits: Tensor, teacher_logits: Tensor, y,
                                  before, after: Tensor | None, cfg: ObjectiveConfig,
                                  rng: np.random.Generator | None) -> Tensor:
    """Maximized by the policy.

    non-saturating(target, smoothed y) - CE(teacher, y) - lambda * colour SWD.
    Smoothing applies to the target term only.
    """
    y = np.asarray(y)
    value = non_saturating_loss(target_logits, smooth_labels(y, cfg.smoothing))
    value = value - cross_entropy(teacher_logits, y)
    if cfg.color_reg > 0:
        reg = color_regularization(before, after, cfg.swd_projections, rng)
        value = value - reg * cfg.color_reg
    return value


def policy_objective_adv_aa(target_logits: Tensor, y) -> Tensor:
    """Cross-entropy of the target model, maximized by the policy."""
    return cross_entropy(target_logits, y)


def policy_objective_pointaugment(aug_logits: Tensor, clean_logits: Tensor, y) -> Tensor:
    """Minimized by the policy.

    Per sample L_aug + |1 - exp(L_aug - rho L_clean)| with rho = exp(y . f_aug),
    then averaged over the batch. rho is differentiated through as written.
    """
    y = np.asarray(y, dtype=aug_logits.dtype)
    l_aug = _per_sample_ce(aug_logits, y)
    l_clean = _per_sample_ce(clean_logits, y)
    rho = ops.exp(ops.sum(ops.softmax(aug_logits) * y, axis=-1))
    penalty = ops.abs(1.0 - ops.exp(l_aug - rho * l_clean))
    return ops.mean(l_aug + penalty)


def consistency_objective(target_logits: Tensor, teacher_logits: Tensor, y,
                          kind: str) -> Tensor:
    """CE(target) + D(target, teacher); minimized by the target model.

    ``kind`` is "mse" (mean squared difference of probability vectors) or
    "kld" (KL(teacher || target), batch mean). The teacher side is constant.
    """
    y = np.asarray(y)
    ce = cross_entropy(target_logits, y)
    teacher = Tensor(teacher_logits.data)
    if kind == "mse":
        diff = ops.softmax(target_logits) - ops.softmax_np(teacher.data)
        return ce + ops.mean(ops.square(diff))
    if kind == "kld":
        log_t = ops.log_softmax_np(teacher.data)
        p_t = np.exp(log_t)
        log_s = ops.log_softmax(target_logits)
        kl = ops.sum((log_t - log_s) * p_t, axis=-1)
        return ce + ops.mean(kl)
    raise ConfigError(f"consistency kind must be 'mse' or 'kld', got {kind!r}")
