"""Compressive-Transformer style baseline: pool evicted KV rows into a fixed slot budget."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .attention import EvictedPair


def pool_rows(rows: np.ndarray, pool: str, axis: int = 0) -> np.ndarray:
    if pool == "max":
        return rows.max(axis=axis)
    if pool == "avg":
        return rows.mean(axis=axis)
    raise ValueError(f"unknown pool {pool!r}")


def slot_capacity(n_q_heads: int, n_kv_heads: int, head_dim: int) -> int:
    """Pooled rows per layer whose K+V footprint equals one H x H state per query head."""
    return max(1, (head_dim * head_dim * n_q_heads) // (2 * head_dim * n_kv_heads))


def ct_compress(evicted: list[EvictedPair], rate: int = 4, pool: str = "max",
                capacity: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pool every ``rate`` consecutive evicted pairs into one (k, v) slot; keep the newest ``capacity``."""
    if rate < 1:
        raise ValueError("compression rate must be >= 1")
    slots = deque(maxlen=capacity)
    for start in range(0, len(evicted) - rate + 1, rate):
        group = evicted[start:start + rate]
        slots.append((pool_rows(np.stack([p.k for p in group]), pool),
                      pool_rows(np.stack([p.v for p in group]), pool)))
    return list(slots)


@dataclass
class CtMemory:
    """Streaming form: buffer evictions until ``rate`` arrive, then emit one pooled slot."""

    rate: int
    pool: str
    capacity: int
    pending: list = field(default_factory=list)
    slots: deque = field(default_factory=deque)

    def push(self, pair: EvictedPair):
        self.pending.append(pair)
        if len(self.pending) == self.rate:
            (slot,) = ct_compress(self.pending, self.rate, self.pool)
            self.pending = []
            self.slots.append(slot)
            if len(self.slots) > self.capacity:
                self.slots.popleft()

    def keys(self) -> list[np.ndarray]:
        return [s[0] for s in self.slots]

    def values(self) -> list[np.ndarray]:
        return [s[1] for s in self.slots]


def ct_layout(length: int, sinks: int, window: int, rate: int, capacity: int):
    """Group boundaries and the visibility mask of pooled slots for a batched forward.

    Group g pools evicted positions sinks+rate*g .. sinks+rate*g+rate-1 and
    becomes visible to query t once its last member left the window; only the
    newest ``capacity`` complete groups are visible.
    """
    n_evict = max(0, length - sinks - window)
    n_groups = n_evict // rate
    t = np.arange(length)[:, None]
    g = np.arange(n_groups)[None, :]
    complete = np.clip((t - window - sinks + 1) // rate, 0, None)
    visible = (g < complete) & (g >= complete - capacity)
    return n_groups, visible
