"""Momentum SGD (Nesterov) and AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NonFiniteError, StructureError
from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str                          # "sgd" | "adamw"
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    nesterov: bool = True
    step_count: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")


class Optimizer:
    """Updates a fixed, named list of parameters in place from their ``grad``."""

    def __init__(self, named_params, state: OptimizerState):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.state = state

    @classmethod
    def sgd(cls, named_params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
            nesterov: bool = True) -> Optimizer:
        return cls(named_params, OptimizerState("sgd", lr, weight_decay, momentum=momentum,
                                                nesterov=nesterov))

    @classmethod
    def adamw(cls, named_params, lr: float = 1e-3, weight_decay: float = 1e-2,
              betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
        return cls(named_params, OptimizerState("adamw", lr, weight_decay, betas=tuple(betas),
                                                eps=eps))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [(n, p, p.grad) for n, p in self.params if p.grad is not None]
        bad = [n for n, _, g in grads if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteError(f"non-finite gradients in {bad} at step {self.state.step_count}")
        st = self.state
        st.step_count += 1
        for name, p, g in grads:
            if g.shape != p.shape:
                raise StructureError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
            if st.kind == "sgd":
                self._sgd(name, p, g.astype(p.dtype, copy=False))
            else:
                self._adamw(name, p, g.astype(p.dtype, copy=False))

    def _sgd(self, name: str, p: Tensor, g: np.ndarray) -> None:
        st = self.state
        if st.weight_decay:
            g = g + st.weight_decay * p.data
        if st.momentum:
            key = "buf." + name
            buf = st.buffers.get(key)
            buf = g.copy() if buf is None else st.momentum * buf + g
            st.buffers[key] = buf
            g = g + st.momentum * buf if st.nesterov else buf
        p.data = p.data - st.lr * g

    def _adamw(self, name: str, p: Tensor, g: np.ndarray) -> None:
        st = self.state
        b1, b2 = st.betas
        t = st.step_count
        m = st.buffers.get("m." + name)
        v = st.buffers.get("v." + name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        st.buffers["m." + name] = m
        st.buffers["v." + name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        decayed = p.data * (1 - st.lr * st.weight_decay)
        p.data = (decayed - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)).astype(p.dtype, copy=False)


def optimizer_step(opt: Optimizer, params=None, grads=None) -> None:
    """Functional entry point: optionally install ``grads`` then step."""
    if grads is not None:
        targets = params if params is not None else [p for _, p in opt.params]
        for p, g in zip(targets, grads):
            p.grad = np.asarray(g)
    opt.step()
