"""Complexity accounting, the pooling baseline, the gradient probe and perplexity curves."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .ahn import Variant
from .attention import MixerMode
from .compressive import ct_compress, slot_capacity  # noqa: F401  (re-exported)
from .model import Model
from .numerics import Tensor

MIXERS = ("full", "swa", "ct", "ahn")


@dataclass(frozen=True)
class ComplexitySpec:
    L: int
    W: int
    D: int
    H: int
    n_q: int
    n_kv: int
    n_layers: int = 1
    base_param_count: int = 0

    def __post_init__(self):
        for name in ("L", "W", "D", "H", "n_q", "n_kv", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# public model-card dimensions (external inputs, not derived here)
PRESETS = {
    "qwen3b": ComplexitySpec(L=128000, W=32768, D=2048, H=128, n_q=16, n_kv=2, n_layers=36,
                             base_param_count=3_090_000_000),
    "qwen7b": ComplexitySpec(L=128000, W=32768, D=3584, H=128, n_q=28, n_kv=4, n_layers=28,
                             base_param_count=7_610_000_000),
    "qwen14b": ComplexitySpec(L=128000, W=32768, D=5120, H=128, n_q=40, n_kv=8, n_layers=48,
                              base_param_count=14_700_000_000),
}


@dataclass(frozen=True)
class Complexity:
    params_extra: int
    flops_mixing: int
    memory_cache: int


def ahn_gate_count(variant: Variant | str) -> int:
    return len(Variant(variant).gate_names())


def complexity(spec: ComplexitySpec, mixer: str, variant: Variant | str = Variant.GDN,
               include_gray: bool = True, check_window: bool = True) -> Complexity:
    """Per-layer token-mixer cost, matmul FLOPs only; integers so differences are exact.

    ``W`` counts sink slots plus the sliding window. With ``check_window`` off
    a window longer than the sequence is clamped (no evictions), which is how
    the FLOP curves treat short sequences.
    """
    mixer = {"sinksswa": "swa", "sinks+swa": "swa", "ct-max": "ct", "ct-avg": "ct"}.get(mixer.lower(), mixer.lower())
    if mixer not in MIXERS:
        raise ValueError(f"unknown mixer {mixer!r}")
    L, W, D, H, nq, nkv = spec.L, spec.W, spec.D, spec.H, spec.n_q, spec.n_kv
    if W > L:
        if check_window:
            raise ValueError(f"window {W} exceeds sequence length {L}")
        W = L
    proj = 4 * L * D * H * (nq + nkv)
    if mixer == "full":
        return Complexity(0, proj + 2 * H * nq * L * L, 2 * L * H * nkv)
    evicted = L - W
    flops = proj + 2 * H * nq * W * W + 2 * evicted * (2 * W * H * nq)
    cache = 2 * W * H * nkv
    if mixer == "swa":
        return Complexity(0, flops, cache)
    if mixer == "ct":
        slots = slot_capacity(nq, nkv, H)
        return Complexity(0, flops + 2 * evicted * (2 * slots * H * nq), cache + slots * 2 * H * nkv)
    gates = ahn_gate_count(variant) * D * nq
    state = H * H * nq
    extra = gates + state + (nq if Variant(variant) is Variant.MAMBA2 else 0)
    if include_gray:
        flops += 2 * evicted * (state + gates + state)
    return Complexity(extra if include_gray else 0, flops, cache + state)


@dataclass(frozen=True)
class RatioRow:
    mixer: str
    extra_param_ratio: float
    flop_ratio: float
    cache_ratio: float
    absolute: Complexity


def ratio_table(spec: ComplexitySpec, variant: Variant | str = Variant.GDN,
                include_gray: bool = True) -> list[RatioRow]:
    full = complexity(spec, "full")
    rows = []
    for mixer in ("full", "swa", "ct", "ahn"):
        c = complexity(spec, mixer, variant, include_gray)
        extra = c.params_extra * spec.n_layers / spec.base_param_count if spec.base_param_count else 0.0
        rows.append(RatioRow(mixer, extra, c.flops_mixing / full.flops_mixing,
                             c.memory_cache / full.memory_cache, c))
    return rows


def flop_curve(spec: ComplexitySpec, mixer: str, lengths, variant: Variant | str = Variant.GDN) -> list[dict]:
    rows = []
    for L in lengths:
        s = ComplexitySpec(int(L), spec.W, spec.D, spec.H, spec.n_q, spec.n_kv, spec.n_layers, spec.base_param_count)
        c = complexity(s, mixer, variant, check_window=False)
        rows.append({"L": int(L), "mixer": mixer, "flops": c.flops_mixing, "cache": c.memory_cache})
    return rows


def second_differences(values) -> list[int]:
    v = list(values)
    return [v[i + 2] - 2 * v[i + 1] + v[i] for i in range(len(v) - 2)]


# ---- gradient probe ---------------------------------------------------------

@dataclass(frozen=True)
class ProbeEntry:
    position: int
    token: int
    magnitude: float


@dataclass
class ProbeReport:
    entries: list[ProbeEntry]
    kl: float

    @property
    def max_magnitude(self) -> float:
        return max((e.magnitude for e in self.entries), default=0.0)

    def rows(self) -> list[dict]:
        mags = np.array([e.magnitude for e in self.entries])
        order = mags.argsort(kind="stable")
        quant = np.empty(len(mags))
        quant[order] = np.arange(len(mags)) / max(1, len(mags) - 1)
        top = self.max_magnitude or 1.0
        return [{"position": e.position, "token": e.token, "magnitude": e.magnitude,
                 "normalized": e.magnitude / top, "quantile": float(q)}
                for e, q in zip(self.entries, quant)]


def kl_divergence(teacher_logits: Tensor, student_logits: Tensor) -> Tensor:
    """Mean KL(softmax(t) || softmax(s)) differentiable in both arguments."""
    t_lp = nx.log_softmax(teacher_logits)
    s_lp = nx.log_softmax(student_logits)
    rows = t_lp.data.size // t_lp.shape[-1]
    return nx.scale(nx.sum_(nx.mul(nx.exp(t_lp), nx.sub(t_lp, s_lp))), 1.0 / rows)


def probe_loss(model: Model, x: Tensor, sinks: int, window: int, last_only: bool = True) -> Tensor:
    teacher = model.forward(embeddings=x, mode=MixerMode.FULL)
    student = model.forward(embeddings=x, mode=MixerMode.SINKS_SWA_AHN, sinks=sinks, window=window)
    if last_only:
        teacher, student = teacher[-1:], student[-1:]
    return kl_divergence(teacher, student)


def grad_probe(model: Model, tokens, sinks: int, window: int, last_only: bool = True) -> ProbeReport:
    """L2 norm of d KL(teacher || student) / d embedding for every token that left the window.

    The KL is taken at the final position by default, where the split into
    in-window tokens and compressed history is defined; both the teacher and
    the student paths contribute gradient.
    """
    tokens = np.asarray(tokens)
    length = len(tokens)
    if length <= sinks + window:
        raise ValueError(f"sequence of {length} tokens never leaves sinks={sinks} + window={window}")
    saved = {n: t.requires_grad for n, t in model.params.items()}
    model.set_trainable([])
    try:
        x = Tensor(model.params["embed"].data[tokens].copy(), requires_grad=True)
        loss = probe_loss(model, x, sinks, window, last_only)
        loss.backward()
    finally:
        for n, flag in saved.items():
            model.params[n].requires_grad = flag
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    out = range(sinks, length - window)
    entries = [ProbeEntry(p, int(tokens[p]), float(np.linalg.norm(grad[p]))) for p in out]
    return ProbeReport(entries, float(loss.data))


# ---- perplexity curves ------------------------------------------------------

def ppl_curve(model: Model, text: bytes | np.ndarray, mode, report_stride: int = 64,
              sinks: int | None = None, window: int | None = None) -> list[dict]:
    """Running perplexity exp(mean NLL over positions <= p) at every ``report_stride`` positions."""
    data = np.frombuffer(text, dtype=np.uint8) if isinstance(text, (bytes, bytearray)) else np.asarray(text)
    if data.size < 2:
        raise ValueError("need at least two bytes of text")
    data = data.astype(np.int64)
    with nx.no_grad():
        logits = model.forward(data[:-1], mode, sinks=sinks, window=window).data.astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(len(data) - 1), data[1:]]
    running = np.cumsum(nll) / np.arange(1, len(nll) + 1)
    points = list(range(report_stride - 1, len(nll), report_stride))
    if not points or points[-1] != len(nll) - 1:
        points.append(len(nll) - 1)
    mode_name = mode.value if isinstance(mode, MixerMode) else str(mode)
    return [{"position": p + 1, "mode": mode_name, "nll": float(nll[p]),
             "running_ppl": float(math.exp(running[p]))} for p in points]


def position_nll(model: Model, sequences: np.ndarray, mode, sinks: int, window: int) -> np.ndarray:
    """Mean next-token NLL per position over a batch of [N, L+1] sequences."""
    sequences = np.asarray(sequences)
    out = []
    for b in range(0, len(sequences), 8):
        chunk = sequences[b:b + 8]
        with nx.no_grad():
            logits = model.forward(chunk[:, :-1], mode, sinks=sinks, window=window).data.astype(np.float64)
        m = logits.max(axis=-1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        out.append(-np.take_along_axis(logp, chunk[:, 1:, None], axis=-1)[..., 0])
    return np.concatenate(out).mean(axis=0)
