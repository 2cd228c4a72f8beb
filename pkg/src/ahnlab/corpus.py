"""Byte corpus ingestion with a hash-based train/heldout split."""
from __future__ import annotations

import hashlib
import os
import sysconfig
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TEXT_SUFFIXES = (".txt", ".md", ".rst", ".py")


@dataclass(frozen=True)
class CorpusShard:
    path: str
    length: int
    split: str
    digest: str


class CorpusError(RuntimeError):
    pass


SPLIT_SALT = "ahn1"
BOS = 256  # the extra vocabulary id; starts every sampled sequence


def _split_for(rel: str, heldout_every: int, salt: str = SPLIT_SALT) -> str:
    # the salt is fixed so that both stdlib splits hold more than 5 MB
    h = int(hashlib.sha256((salt + rel).encode("utf-8")).hexdigest()[:8], 16)
    return "heldout" if h % heldout_every == 0 else "train"


def discover(root: str | os.PathLike, suffixes=TEXT_SUFFIXES, heldout_every: int = 2,
             min_bytes: int = 256) -> list[CorpusShard]:
    root = Path(root)
    if root.is_file():
        files = [root]
        root = root.parent
    elif root.is_dir():
        files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in suffixes)
    else:
        raise CorpusError(f"corpus path {root} does not exist")
    shards = []
    for path in files:
        size = path.stat().st_size
        if size < min_bytes:
            continue
        rel = path.relative_to(root).as_posix()
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        shards.append(CorpusShard(str(path), size, _split_for(rel, heldout_every), digest))
    if not shards:
        raise CorpusError(f"no text shards found under {root}")
    return shards


def stdlib_root() -> str:
    """Default corpus: the interpreter's own standard library sources."""
    return sysconfig.get_paths()["stdlib"]


class Corpus:
    """Train/heldout byte arrays; ``batch`` samples random windows, each opened with BOS by default."""

    def __init__(self, shards: list[CorpusShard], bos: bool = True):
        self.shards = shards
        self.bos = bos
        train = [s for s in shards if s.split == "train"]
        heldout = [s for s in shards if s.split == "heldout"]
        overlap = {s.digest for s in train} & {s.digest for s in heldout}
        # identical files can land in both splits under different paths; keep them heldout only
        train = [s for s in train if s.digest not in overlap]
        self.train_shards, self.heldout_shards = train, heldout
        self.train = self._load(train)
        self.heldout = self._load(heldout)

    @classmethod
    def from_path(cls, root, bos: bool = True, **kw) -> "Corpus":
        return cls(discover(root, **kw), bos=bos)

    @staticmethod
    def _load(shards) -> np.ndarray:
        if not shards:
            return np.zeros(0, dtype=np.uint8)
        parts = [np.frombuffer(Path(s.path).read_bytes(), dtype=np.uint8) for s in shards]
        return np.concatenate(parts)

    def check_disjoint(self):
        if {s.digest for s in self.train_shards} & {s.digest for s in self.heldout_shards}:
            raise CorpusError("heldout shard content appears in the training split")

    def split(self, name: str) -> np.ndarray:
        data = {"train": self.train, "heldout": self.heldout}[name]
        if data.size == 0:
            raise CorpusError(f"{name} split is empty")
        return data

    def batch(self, split: str, batch_size: int, length: int, rng: np.random.Generator) -> np.ndarray:
        data = self.split(split)
        if data.size <= length:
            raise CorpusError(f"{split} split has {data.size} bytes, need more than {length}")
        n = length - 1 if self.bos else length
        starts = rng.integers(0, data.size - n, batch_size)
        rows = np.stack([data[s:s + n] for s in starts]).astype(np.int64)
        if self.bos:
            rows = np.concatenate([np.full((batch_size, 1), BOS, dtype=np.int64), rows], axis=1)
        return rows

    def eval_set(self, n: int, length: int, seed: int = 1234) -> np.ndarray:
        return self.batch("heldout", n, length, np.random.default_rng(seed))
