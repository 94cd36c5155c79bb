"""Teacher model: an EMA shadow of the target or a frozen pretrained copy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructureError
from .numerics import Module, Tensor, no_grad

TEACHER_KINDS = ("ema", "pretrained")


@dataclass
class TeacherState:
    kind: str
    model: Module
    decay: float = 0.999
    source: str | None = None

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ConfigError(f"teacher kind must be one of {TEACHER_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.decay <= 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1], got {self.decay}")
        self.model.requires_grad_(False)
        self.model.eval()

    @classmethod
    def ema(cls, target: Module, decay: float = 0.999) -> TeacherState:
        """Start the shadow as an exact, non-aliased copy of ``target``."""
        return cls("ema", target.clone(), decay)

    @classmethod
    def pretrained(cls, template: Module, state: dict[str, np.ndarray],
                   source: str | None = None) -> TeacherState:
        """Freeze ``state`` into a copy of ``template`` (same architecture)."""
        model = template.clone()
        model.load_state_dict(state)
        return cls("pretrained", model, decay=1.0, source=source)


def ema_update(teacher: TeacherState, target: Module, decay: float | None = None) -> None:
    """theta_hat <- xi * theta_hat + (1 - xi) * theta, elementwise, in place."""
    if teacher.kind != "ema":
        raise ConfigError("ema_update called on a pretrained teacher")
    xi = teacher.decay if decay is None else decay
    mine = dict(teacher.model.named_parameters())
    theirs = dict(target.named_parameters())
    if mine.keys() != theirs.keys():
        raise StructureError("teacher and target parameter names differ")
    for name, p in mine.items():
        q = theirs[name]
        if p.shape != q.shape:
            raise StructureError(f"{name}: teacher {p.shape} vs target {q.shape}")
        if p is q or np.shares_memory(p.data, q.data):
            raise StructureError(f"{name}: teacher aliases the target's parameters")
        p.data = (xi * p.data + (1.0 - xi) * q.data).astype(p.dtype, copy=False)


def teacher_forward(teacher: TeacherState, x) -> Tensor:
    """Eval-mode logits. No gradient reaches the teacher's parameters, but one
    does flow back into ``x`` when it is a tensor that requires it."""
    model = teacher.model
    if any(p.requires_grad for p in model.parameters()):
        model.requires_grad_(False)
    model.eval()
    if isinstance(x, Tensor) and x.requires_grad:
        return model(x)
    with no_grad():
        return model(x if isinstance(x, Tensor) else Tensor(np.asarray(x)))
