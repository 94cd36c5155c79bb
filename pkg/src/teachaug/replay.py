"""Buffer of past augmentation policies sampled with recency priorities."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .numerics import Module


class ReplayBuffer:
    """Snapshots in insertion order; snapshot i of S has priority gamma^(S - i).

    Sampling can include the live (unstored) policy as an implicit newest entry.
    The buffer never evicts.
    """

    def __init__(self, gamma: float = 0.99, n_buffer: int = 10):
        if not 0.0 < gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
        if n_buffer < 1:
            raise ConfigError("n_buffer must be a positive integer")
        self.gamma = gamma
        self.n_buffer = n_buffer
        self.snapshots: list[Module] = []

    def __len__(self) -> int:
        return len(self.snapshots)

    def store(self, policy: Module) -> None:
        self.snapshots.append(policy.clone())

    def due(self, epoch: int) -> bool:
        """Whether a snapshot is taken after finishing ``epoch`` (1-based)."""
        return epoch > 0 and epoch % self.n_buffer == 0

    def priorities(self, count: int | None = None) -> np.ndarray:
        s = len(self.snapshots) if count is None else count
        return self.gamma ** (s - np.arange(1, s + 1, dtype=np.float64))

    def probabilities(self, include_live: bool = False) -> np.ndarray:
        p = self.priorities(len(self.snapshots) + int(include_live))
        return p / p.sum()

    def sample_index(self, rng: np.random.Generator, include_live: bool = False) -> int:
        n = len(self.snapshots) + int(include_live)
        if n == 0:
            raise IndexError("sampling from an empty replay buffer")
        if n == 1:
            return 0
        probs = self.probabilities(include_live)
        return int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), n - 1))

    def sample(self, rng: np.random.Generator, live: Module | None = None) -> Module:
        """Draw a policy. With ``live`` given it competes as the newest entry;
        an empty buffer falls back to it."""
        if not self.snapshots:
            if live is None:
                raise IndexError("sampling from an empty replay buffer")
            return live
        idx = self.sample_index(rng, include_live=live is not None)
        return live if idx == len(self.snapshots) else self.snapshots[idx]
