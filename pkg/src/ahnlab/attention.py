"""Causal attention under full, sinks+window and compressed-slot masks, plus the KV window cache."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class MixerMode(str, enum.Enum):
    FULL = "full"
    SINKS_SWA = "swa"
    SINKS_SWA_AHN = "ahn"
    SINKS_SWA_CT_MAX = "ct-max"
    SINKS_SWA_CT_AVG = "ct-avg"

    @property
    def windowed(self) -> bool:
        return self is not MixerMode.FULL

    @property
    def is_ct(self) -> bool:
        return self in (MixerMode.SINKS_SWA_CT_MAX, MixerMode.SINKS_SWA_CT_AVG)

    @property
    def pool(self) -> str | None:
        return {MixerMode.SINKS_SWA_CT_MAX: "max", MixerMode.SINKS_SWA_CT_AVG: "avg"}.get(self)

    @classmethod
    def parse(cls, text: str) -> "MixerMode":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown mixer mode {text!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


@dataclass(frozen=True)
class AttentionConfig:
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    sinks: int = 0
    window: int = 1

    def __post_init__(self):
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.window < 1 or self.sinks < 0:
            raise ValueError("window must be >= 1 and sinks >= 0")

    @property
    def groups(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)


@dataclass
class QkvWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


def project_qkv(x: Tensor, weights: QkvWeights) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != weights.w_q.shape[0]:
        raise nx.ShapeError(f"input width {x.shape[-1]} does not match projection {weights.w_q.shape}")
    return x @ weights.w_q, x @ weights.w_k, x @ weights.w_v


def split_heads(t: Tensor, n_heads: int) -> Tensor:
    """[..., L, N*H] -> [..., N, L, H]."""
    *lead, length, width = t.shape
    t = t.reshape(*lead, length, n_heads, width // n_heads)
    nd = t.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return nx.transpose(t, axes)


def merge_heads(t: Tensor) -> Tensor:
    """[..., N, L, H] -> [..., L, N*H]."""
    nd = t.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    t = nx.transpose(t, axes)
    *lead, length, n, h = t.shape
    return t.reshape(*lead, length, n * h)


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float64):
    positions = np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = positions[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def build_mask(length: int, mode: MixerMode, cfg: AttentionConfig) -> np.ndarray:
    if length < 1:
        raise ValueError("mask length must be >= 1")
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    causal = j <= i
    if mode is MixerMode.FULL:
        return causal
    return causal & ((j < cfg.sinks) | (i - j < cfg.window))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, scale: float) -> Tensor:
    """softmax(q k^T * scale, masked) v over the last two axes; k/v already expanded to query heads."""
    scores = nx.scale(q, scale) @ nx.swapaxes(k, -1, -2)
    return nx.softmax_rows(scores, mask) @ v


@dataclass
class EvictedPair:
    k: np.ndarray  # [n_kv, H], rotated at its absolute position
    v: np.ndarray  # [n_kv, H]
    x: np.ndarray | None  # [D] normalized layer input of the evicted token
    pos: int


@dataclass
class KvWindow:
    """Sink slots plus a ring buffer of the most recent ``window`` rows.

    ``window=None`` makes the ring unbounded (full attention cache).
    """

    n_kv_heads: int
    head_dim: int
    sinks: int
    window: int | None
    dtype: type = np.float64
    sink_keys: list = field(default_factory=list)
    sink_values: list = field(default_factory=list)
    sink_positions: list = field(default_factory=list)
    ring_keys: list = field(default_factory=list)
    ring_values: list = field(default_factory=list)
    ring_inputs: list = field(default_factory=list)
    ring_positions: list = field(default_factory=list)
    evictions: int = 0

    def __len__(self):
        return len(self.sink_positions) + len(self.ring_positions)

    @property
    def last_position(self) -> int:
        if self.ring_positions:
            return self.ring_positions[-1]
        return self.sink_positions[-1] if self.sink_positions else -1

    def append(self, k_row: np.ndarray, v_row: np.ndarray, pos: int, x: np.ndarray | None = None):
        if pos <= self.last_position:
            raise ValueError(f"position {pos} does not follow stored position {self.last_position}")
        if len(self.sink_positions) < self.sinks:
            self.sink_keys.append(k_row)
            self.sink_values.append(v_row)
            self.sink_positions.append(pos)
            return None
        self.ring_keys.append(k_row)
        self.ring_values.append(v_row)
        self.ring_inputs.append(x)
        self.ring_positions.append(pos)
        if self.window is not None and len(self.ring_positions) > self.window:
            self.evictions += 1
            return EvictedPair(self.ring_keys.pop(0), self.ring_values.pop(0),
                               self.ring_inputs.pop(0), self.ring_positions.pop(0))
        return None

    def keys(self) -> np.ndarray:
        rows = self.sink_keys + self.ring_keys
        return np.stack(rows, axis=1) if rows else np.zeros((self.n_kv_heads, 0, self.head_dim), self.dtype)

    def values(self) -> np.ndarray:
        rows = self.sink_values + self.ring_values
        return np.stack(rows, axis=1) if rows else np.zeros((self.n_kv_heads, 0, self.head_dim), self.dtype)

    def positions(self) -> list[int]:
        return self.sink_positions + self.ring_positions


def kv_append(win: KvWindow, k_row, v_row, pos: int, x=None) -> EvictedPair | None:
    return win.append(np.asarray(k_row), np.asarray(v_row), pos, x)
