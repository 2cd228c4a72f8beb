"""Experiment drivers shared by scripts/ and the acceptance tests.

The frozen base is pretrained once per (model config, pretraining config,
corpus) and cached on disk, since every distillation run starts from it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import MixerMode
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import Corpus
from .distill import DistillConfig, Fixed, RandomRange, Trainer, evaluate
from .model import Model, ModelConfig

log = logging.getLogger(__name__)


def default_cache_dir() -> str:
    return os.environ.get("AHNLAB_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "ahnlab"))


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 4
    seq_len: int = 256
    weight_decay: float = 0.1
    seed: int = 0


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256(f"bos={corpus.bos}".encode())
    for s in corpus.train_shards:
        h.update(s.digest.encode())
    return h.hexdigest()


def base_path(corpus: Corpus, model_cfg: ModelConfig | None = None, cfg: PretrainConfig | None = None,
              cache_dir: str | None = None) -> str:
    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or PretrainConfig()
    key = hashlib.sha256((model_cfg.to_text() + repr(asdict(cfg)) + corpus_digest(corpus)).encode()).hexdigest()
    return os.path.join(cache_dir or default_cache_dir(), f"base-{key[:16]}.ckpt")


def pretrain_seconds(path: str) -> float | None:
    """Wall time recorded when the cached base at ``path`` was trained."""
    try:
        with open(path + ".json", encoding="utf-8") as fh:
            return float(json.load(fh)["seconds"])
    except (OSError, ValueError, KeyError):
        return None


def pretrain_base(corpus: Corpus, model_cfg: ModelConfig | None = None, cfg: PretrainConfig | None = None,
                  cache_dir: str | None = None, on_step=None) -> Model:
    """Next-byte training of the whole model in full-attention mode (the teacher)."""
    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or PretrainConfig()
    path = base_path(corpus, model_cfg, cfg, cache_dir)
    if os.path.exists(path):
        try:
            return load_checkpoint(path)
        except CheckpointError:
            log.warning("ignoring unreadable cached base %s", path)
    model = Model(model_cfg)
    dcfg = DistillConfig(lr=cfg.lr, batch_size=cfg.batch_size, seq_len=cfg.seq_len, steps=cfg.steps,
                         weight_decay=cfg.weight_decay, seed=cfg.seed)
    start = time.perf_counter()
    Trainer(model, dcfg, cfg.steps, stage="base").run(corpus, on_step=on_step)
    seconds = time.perf_counter() - start
    log.info("pretrained base in %.0fs", seconds)
    save_checkpoint(model, path)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump({"seconds": seconds, "steps": cfg.steps}, fh)
    return model


def copy_model(model: Model) -> Model:
    clone = Model(model.cfg)
    for name, t in model.params.items():
        clone.params[name].data = t.data.copy()
    return clone


@dataclass
class DistillResult:
    model: Model
    curve: list[dict] = field(default_factory=list)  # step, window, kl, ppl
    seconds: float = 0.0

    def kl_at(self, step: int, window: int) -> float:
        return next(r["kl"] for r in self.curve if r["step"] == step and r["window"] == window)


def distill(base: Model, corpus: Corpus, cfg: DistillConfig, eval_seqs: np.ndarray, eval_windows,
            sinks: int = 4, eval_every: int | None = None, on_step=None) -> DistillResult:
    """Train AHN parameters on a copy of ``base``; record held-out KL/ppl per window along the way."""
    model = copy_model(base)
    total = cfg.total_steps(corpus.train.size)
    trainer = Trainer(model, cfg, total)
    result = DistillResult(model)

    def record():
        for w in eval_windows:
            row = evaluate(model, eval_seqs, MixerMode.SINKS_SWA_AHN, w, sinks)
            result.curve.append({"step": trainer.step, "window": w, "kl": row.kl, "ppl": row.ppl})

    start = time.perf_counter()
    record()
    while trainer.step < total:
        chunk = eval_every or total
        trainer.run(corpus, steps=min(chunk, total - trainer.step), on_step=on_step)
        record()
    result.seconds = time.perf_counter() - start
    return result


def window_baselines(model: Model, eval_seqs: np.ndarray, windows, sinks: int = 4) -> list[dict]:
    rows = []
    for w in windows:
        for mode in (MixerMode.SINKS_SWA, MixerMode.SINKS_SWA_AHN):
            r = evaluate(model, eval_seqs, mode, w, sinks)
            rows.append({"mode": r.mode, "window": w, "kl": r.kl, "ppl": r.ppl})
    return rows


__all__ = ["PretrainConfig", "pretrain_base", "base_path", "pretrain_seconds", "distill", "DistillResult", "window_baselines", "copy_model",
           "Fixed", "RandomRange"]
