"""Self-distillation of the AHN parameters against the same frozen model run with full attention."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import MixerMode
from .model import Model
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Fixed:
    value: int

    def sample(self, rng: np.random.Generator) -> int:
        return self.value

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class RandomRange:
    low: int
    high: int  # inclusive

    def __post_init__(self):
        if self.high < self.low:
            raise ValueError(f"empty range [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))

    def __str__(self):
        return f"{self.low}:{self.high}"


def parse_sampler(text: str):
    """``64`` -> Fixed(64); ``32:96`` -> RandomRange(32, 96)."""
    text = str(text).strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        return RandomRange(int(lo), int(hi))
    return Fixed(int(text))


@dataclass
class DistillConfig:
    objective: str = "kl"
    window_sampler: Fixed | RandomRange = field(default_factory=lambda: RandomRange(32, 96))
    sink_sampler: Fixed | RandomRange = field(default_factory=lambda: Fixed(4))
    lr: float = 1e-4
    warmup_frac: float = 0.10
    schedule: str = "cosine"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    batch_size: int = 4
    seq_len: int = 256
    epochs: int = 1
    steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.objective not in ("kl", "ce"):
            raise ValueError(f"objective must be 'kl' or 'ce', got {self.objective!r}")

    def total_steps(self, corpus_bytes: int) -> int:
        if self.steps is not None:
            return self.steps
        return max(1, self.epochs * corpus_bytes // (self.batch_size * self.seq_len))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def lr_at(step: int, total: int, peak: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup over ceil(warmup_frac*total) steps, then cosine decay to zero."""
    warm = math.ceil(warmup_frac * total)
    if step < warm:
        return peak * (step + 1) / warm
    span = max(1, total - warm)
    return peak * 0.5 * (1 + math.cos(math.pi * min(step - warm, span) / span))


def kl_loss(teacher_logits, student_logits: Tensor, positions: slice | None = None) -> Tensor:
    """Mean over positions of KL(softmax(teacher) || softmax(student))."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise nx.ShapeError(f"teacher {t.shape} vs student {student_logits.shape}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(student_logits.data))):
        raise nx.NumericError("non-finite logits")
    if positions is not None:
        t = t[..., positions, :]
        student_logits = student_logits[..., positions, :]
    t_logp = nx.log_softmax(Tensor(t)).data
    p = np.exp(t_logp)
    s_logp = nx.log_softmax(student_logits)
    rows = t_logp.size // t_logp.shape[-1]
    cross = nx.sum_(nx.mul(s_logp, Tensor(p)))
    entropy_term = float((p * t_logp).sum())
    return nx.scale(nx.sub(Tensor(np.asarray(entropy_term, dtype=t.dtype)), cross), 1.0 / rows)


def ce_loss(student_logits: Tensor, targets, positions: slice | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` (already shifted to align with the logits)."""
    targets = np.asarray(targets)
    vocab = student_logits.shape[-1]
    if targets.size and (targets.max() >= vocab or targets.min() < 0):
        raise ValueError(f"target id outside vocabulary of size {vocab}")
    if positions is not None:
        student_logits = student_logits[..., positions, :]
        targets = targets[..., positions]
    logp = nx.log_softmax(student_logits)
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    rows = targets.size
    return nx.scale(nx.sum_(nx.mul(logp, Tensor(onehot))), -1.0 / rows)


class AdamW:
    """Adam with decoupled weight decay on matrices (biases and decay rates are not decayed)."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, lr: float, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int):
        for n in self.params:
            self.m[n] = np.array(arrays[f"opt.m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(arrays[f"opt.v.{n}"], dtype=self.v[n].dtype)
        self.t = t


def checksum(model: Model, names) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(np.ascontiguousarray(model.params[n].data).tobytes())
    return h.hexdigest()


def teacher_logits(model: Model, tokens) -> np.ndarray:
    with nx.no_grad():
        return model.forward(tokens, MixerMode.FULL).data


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    window: int
    sinks: int
    grad_norm: float


class Trainer:
    """Optimizes either the AHN parameters (``stage='ahn'``) or the base model (``stage='base'``).

    The base stage is plain next-token training in full-attention mode and
    exists to produce the frozen teacher at toy scale.
    """

    def __init__(self, model: Model, cfg: DistillConfig, total_steps: int, stage: str = "ahn"):
        if stage not in ("ahn", "base"):
            raise ValueError(f"unknown stage {stage!r}")
        self.model, self.cfg, self.total_steps, self.stage = model, cfg, total_steps, stage
        names = model.ahn_names() if stage == "ahn" else model.base_names()
        self.trainable = {n: model.params[n] for n in names}
        model.set_trainable(names)
        self.opt = AdamW(self.trainable, cfg.betas, weight_decay=cfg.weight_decay)
        self.step = 0

    def batch_rng(self, step: int) -> np.random.Generator:
        # a pure function of (seed, step) so resumed runs see the same batches
        return np.random.default_rng([self.cfg.seed, step])

    def train_step(self, tokens: np.ndarray, rng: np.random.Generator | None = None) -> StepMetrics:
        cfg, model = self.cfg, self.model
        rng = rng or self.batch_rng(self.step)
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        lr = lr_at(self.step, self.total_steps, cfg.lr, cfg.warmup_frac)
        if self.stage == "base":
            window = sinks = 0
        else:
            window = cfg.window_sampler.sample(rng)
            sinks = cfg.sink_sampler.sample(rng)

        def abort(reason):
            return NonFiniteLoss(f"{reason} at step {self.step}",
                                 {"step": self.step, "lr": lr, "window": window, "sinks": sinks,
                                  "param_norms": {n: float(np.linalg.norm(t.data))
                                                  for n, t in self.trainable.items()}})

        try:
            if self.stage == "base":
                loss = ce_loss(model.forward(inputs, MixerMode.FULL), targets)
            else:
                logits = model.forward(inputs, MixerMode.SINKS_SWA_AHN, sinks=sinks, window=window)
                if cfg.objective == "kl":
                    loss = kl_loss(teacher_logits(model, inputs), logits)
                else:
                    loss = ce_loss(logits, targets)
        except nx.NumericError as exc:
            raise abort(str(exc)) from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise abort("non-finite loss")
        for t in self.trainable.values():
            t.grad = None
        # a batch that never leaves the window has no path to the AHN parameters
        if loss.requires_grad:
            loss.backward()
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.trainable.items()}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grads = {n: g * (cfg.grad_clip / norm) for n, g in grads.items()}
        self.opt.step(lr, grads)
        metrics = StepMetrics(self.step, value, lr, window, sinks, norm)
        self.step += 1
        return metrics

    def run(self, corpus, steps: int | None = None, on_step=None, split: str = "train"):
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        history = []
        while self.step < end:
            rng = self.batch_rng(self.step)
            tokens = corpus.batch(split, self.cfg.batch_size, self.cfg.seq_len + 1, rng)
            m = self.train_step(tokens, rng)
            history.append(m)
            if on_step is not None:
                on_step(m)
        return history


def train_step(batch: np.ndarray, model: Model, cfg: DistillConfig, trainer: Trainer | None = None) -> StepMetrics:
    trainer = trainer or Trainer(model, cfg, cfg.steps or 1)
    return trainer.train_step(batch)


def format_step(m: StepMetrics) -> str:
    return f"{m.step}\t{m.loss:.6f}\t{m.lr:.6g}\t{m.window}\t{m.sinks}\t{m.grad_norm:.6f}"


@dataclass
class EvalRow:
    mode: str
    window: int
    sinks: int
    kl: float
    ppl: float
    positions: int


def evaluate(model: Model, sequences: np.ndarray, mode, window: int, sinks: int,
             teacher: np.ndarray | None = None, batch_size: int = 8) -> EvalRow:
    """Held-out KL to the full-attention teacher and perplexity, both over beyond-window positions."""
    mode = MixerMode.parse(mode.value if isinstance(mode, MixerMode) else mode)
    sequences = np.asarray(sequences)
    if sequences.size == 0:
        raise ValueError("empty evaluation corpus")
    inputs, targets = sequences[:, :-1], sequences[:, 1:]
    length = inputs.shape[1]
    start = min(sinks + window, length - 1)
    kl_sum, nll_sum, count = 0.0, 0.0, 0
    for b in range(0, len(inputs), batch_size):
        x = inputs[b:b + batch_size]
        with nx.no_grad():
            t = teacher[b:b + batch_size] if teacher is not None else model.forward(x, MixerMode.FULL).data
            s = model.forward(x, mode, sinks=sinks, window=window).data
        t_lp = _log_softmax_np(t[:, start:])
        s_lp = _log_softmax_np(s[:, start:])
        kl_sum += float((np.exp(t_lp) * (t_lp - s_lp)).sum())
        tgt = targets[b:b + batch_size, start:]
        nll_sum -= float(np.take_along_axis(s_lp, tgt[..., None], axis=-1).sum())
        count += tgt.size
    return EvalRow(mode.value, window, sinks, kl_sum / count, math.exp(nll_sum / count), count)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def evaluate_distill(model: Model, sequences: np.ndarray, windows, sinks: int = 4,
                     mode=MixerMode.SINKS_SWA_AHN) -> list[EvalRow]:
    """KL and perplexity per window for context-generalization curves."""
    sequences = np.asarray(sequences)
    if sequences.size == 0:
        raise ValueError("empty evaluation corpus")
    with nx.no_grad():
        teacher = np.concatenate([model.forward(sequences[b:b + 8, :-1], MixerMode.FULL).data
                                  for b in range(0, len(sequences), 8)])
    return [evaluate(model, sequences, mode, w, sinks, teacher) for w in windows]
