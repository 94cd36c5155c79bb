"""Finite-difference checks over every differentiable path, at float64.

Each path builds a deterministic scalar from a seed and compares backward()
against central differences. Seed 0 uses the zero-initialized policy (the
identity augmentation); other seeds randomize the output layers and gates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .augment import (
    AugmentationPolicy, ImageBatch, apply_affine, apply_color, augment, color_params, geo_params,
    sample_gate,
)
from .numerics import Tensor, check_gradients, ops
from .objective import (
    ObjectiveConfig, consistency_objective, policy_objective_adv_aa,
    policy_objective_pointaugment, policy_objective_teachaugment, swd,
)
from .teacher import TeacherState, teacher_forward
from .trainer import TargetModel

TOLERANCE = 1e-3
EPS = 1e-6
K = 3


def _policy(seed: int, context: bool = True) -> AugmentationPolicy:
    rng = np.random.default_rng(seed)
    pol = AugmentationPolicy(rng, context_dim=K if context else 0, noise_dim=6, rgb_hidden=8,
                             noise_hidden=10, geo_hidden=10, dtype=np.float64)
    if seed:
        for mlp in (pol.color.rgb_path, pol.color.noise_path, pol.geo.mlp):
            mlp.fc3.weight.data = rng.standard_normal(mlp.fc3.weight.shape)
            mlp.fc3.bias.data = rng.standard_normal(mlp.fc3.bias.shape)
        pol.gate_logit_c.data = np.asarray(rng.normal())
        pol.gate_logit_g.data = np.asarray(rng.normal())
    return pol


def _images(rng, b=3, h=6, w=6) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(b, h, w, 3))


def _labels(rng, b=3) -> np.ndarray:
    return np.eye(K)[rng.integers(0, K, b)]


def _check(loss: Callable[[], Tensor], params, rng) -> float:
    return check_gradients(loss, params, eps=EPS, max_coords=12, rng=rng).rel_error


# -- paths: seed -> max relative error ----------------------------------------
def path_color_model(seed: int) -> float:
    rng = np.random.default_rng(100 + seed)
    pol = _policy(seed)
    x, y = _images(rng), _labels(rng)
    z = rng.standard_normal((3, pol.noise_dim))
    proj = rng.standard_normal((3, 6, 6, 3))

    def loss():
        a, b = color_params(pol, x, z, y, np.random.default_rng(seed))
        return ops.sum(apply_color(x, a, b) * proj)
    return _check(loss, pol.color.parameters(), rng)


def path_geo_model(seed: int) -> float:
    rng = np.random.default_rng(200 + seed)
    pol = _policy(seed)
    x, y = _images(rng), _labels(rng)
    z = rng.standard_normal((3, pol.noise_dim))
    proj = rng.standard_normal((3, 6, 6, 3))

    def loss():
        return ops.sum(apply_affine(x, geo_params(pol, z, y, np.random.default_rng(seed))) * proj)
    return _check(loss, pol.geo.parameters(), rng)


def path_affine_resampler(seed: int) -> float:
    rng = np.random.default_rng(300 + seed)
    img = Tensor(_images(rng), requires_grad=True)
    resid = Tensor(rng.uniform(-0.24, 0.24, (3, 2, 3)), requires_grad=True)
    proj = rng.standard_normal((3, 6, 6, 3))
    return _check(lambda: ops.sum(ops.affine_resample(img, resid) * proj), [img, resid], rng)


def path_gates(seed: int) -> float:
    rng = np.random.default_rng(400 + seed)
    logit = Tensor(np.asarray(rng.normal()), requires_grad=True)
    u = rng.uniform(size=16)
    w = rng.standard_normal(16)
    # a moderate temperature keeps the relaxation smooth enough for differences
    return _check(lambda: ops.sum(sample_gate(logit, 0.5, u=u) * w), [logit], rng)


def path_augment_end_to_end(seed: int) -> float:
    rng = np.random.default_rng(500 + seed)
    pol = _policy(seed)
    pol.temperature = 0.5
    batch = ImageBatch(_images(rng), _labels(rng))
    proj = rng.standard_normal((3, 6, 6, 3))
    return _check(lambda: ops.sum(augment(pol, batch, np.random.default_rng(seed))[0] * proj),
                  pol.parameters(), rng)


def _logits(rng, b=4):
    return Tensor(rng.standard_normal((b, K)) * 2, requires_grad=True)


def path_objective_teachaugment(seed: int) -> float:
    rng = np.random.default_rng(600 + seed)
    t, s = _logits(rng), _logits(rng)
    y = _labels(rng, 4)
    before = rng.uniform(size=(4, 5, 5, 3))
    after = Tensor(np.clip(before + rng.normal(0, 0.1, before.shape), 0, 1), requires_grad=True)
    cfg = ObjectiveConfig(smoothing=0.1, color_reg=10.0)
    return _check(lambda: policy_objective_teachaugment(t, s, y, before, after, cfg,
                                                        np.random.default_rng(seed)),
                  [t, s, after], rng)


def path_objective_adv_aa(seed: int) -> float:
    rng = np.random.default_rng(700 + seed)
    t, y = _logits(rng), _labels(rng, 4)
    return _check(lambda: policy_objective_adv_aa(t, y), [t], rng)


def path_objective_pointaugment(seed: int) -> float:
    rng = np.random.default_rng(800 + seed)
    a, c, y = _logits(rng), _logits(rng), _labels(rng, 4)
    return _check(lambda: policy_objective_pointaugment(a, c, y), [a, c], rng)


def path_objective_consistency_mse(seed: int) -> float:
    rng = np.random.default_rng(900 + seed)
    t, s, y = _logits(rng), _logits(rng), _labels(rng, 4)
    return _check(lambda: consistency_objective(t, s, y, "mse"), [t], rng)


def path_objective_consistency_kld(seed: int) -> float:
    rng = np.random.default_rng(1000 + seed)
    t, s, y = _logits(rng), _logits(rng), _labels(rng, 4)
    return _check(lambda: consistency_objective(t, s, y, "kld"), [t], rng)


def path_swd(seed: int) -> float:
    rng = np.random.default_rng(1100 + seed)
    a = Tensor(rng.uniform(size=(20, 3)), requires_grad=True)
    b = Tensor(rng.uniform(size=(20, 3)), requires_grad=True)
    return _check(lambda: swd(a, b, 16, np.random.default_rng(seed)), [a, b], rng)


def path_policy_through_models(seed: int) -> float:
    """Policy parameters through target and teacher networks into the full
    teachaugment objective, as in a real policy step."""
    rng = np.random.default_rng(1200 + seed)
    pol = _policy(seed)
    pol.temperature = 0.5
    target = TargetModel(K, 8, 8, rng, np.float64, channels=(4, 6), hidden=8)
    target.requires_grad_(False)
    target.eval()
    teacher = TeacherState.ema(target)
    batch = ImageBatch(_images(rng, 4, 8, 8), _labels(rng, 4))
    cfg = ObjectiveConfig(smoothing=0.1, color_reg=10.0)

    def loss():
        r = np.random.default_rng(seed)
        x_hat, trace = augment(pol, batch, r)
        return policy_objective_teachaugment(target(x_hat), teacher_forward(teacher, x_hat),
                                             batch.labels, batch.pixels, trace.color_out, cfg, r)
    return _check(loss, pol.parameters(), rng)


PATHS: dict[str, Callable[[int], float]] = {
    "color_model": path_color_model,
    "geo_model": path_geo_model,
    "affine_resampler": path_affine_resampler,
    "gates": path_gates,
    "augment": path_augment_end_to_end,
    "objective.teachaugment": path_objective_teachaugment,
    "objective.adv_aa": path_objective_adv_aa,
    "objective.pointaugment": path_objective_pointaugment,
    "objective.consistency_mse": path_objective_consistency_mse,
    "objective.consistency_kld": path_objective_consistency_kld,
    "swd": path_swd,
    "policy_through_models": path_policy_through_models,
}


@dataclass
class SuiteResult:
    errors: dict[str, float]           # path -> max relative error over seeds
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[str]:
        # NaN counts as a failure
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def run_suite(seeds=range(10), paths: dict | None = None, tolerance: float = TOLERANCE) -> SuiteResult:
    paths = PATHS if paths is None else paths
    errors = {}
    for name, fn in paths.items():
        errors[name] = max(fn(int(s)) for s in seeds)
    return SuiteResult(errors, tolerance)
