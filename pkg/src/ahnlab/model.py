"""Byte-level decoder-only LM with a selectable token mixer and a per-token streaming path."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .ahn import AhnParams, CompressedState, Variant, ahn_forward, ahn_readout, update
from .attention import (AttentionConfig, KvWindow, MixerMode, attend, build_mask, merge_heads,
                        rope_tables, split_heads)
from .compressive import CtMemory, ct_layout, pool_rows, slot_capacity
from .numerics import Tensor

PAD_ID = 256
CT_RATE = 4
ARCH_FIELDS = ("vocab", "d_model", "n_layers", "n_q_heads", "n_kv_heads", "head_dim", "ffn_mult",
               "ahn_variant", "rope", "rope_base", "dtype")


@dataclass
class ModelConfig:
    vocab: int = 257
    d_model: int = 128
    n_layers: int = 4
    n_q_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 32
    ffn_mult: int = 2
    sinks: int = 4
    window: int = 64
    mixer_mode: str = "ahn"
    ahn_variant: str = "gdn"
    rope: bool = True
    rope_base: float = 10000.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.d_model != self.n_q_heads * self.head_dim:
            raise ValueError(f"d_model={self.d_model} must equal n_q_heads*head_dim="
                             f"{self.n_q_heads * self.head_dim}")
        self.mixer_mode = MixerMode.parse(str(self.mixer_mode)).value
        self.ahn_variant = Variant(str(self.ahn_variant).lower()).value
        AttentionConfig(self.n_q_heads, self.n_kv_heads, self.head_dim, self.sinks, self.window)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.d_model

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_kv(text))

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                continue
            kwargs[key] = coerce(raw, kinds[key])
        return cls(**kwargs)

    def arch_hash(self) -> str:
        text = "".join(f"{k}={getattr(self, k)}\n" for k in ARCH_FIELDS)
        return hashlib.sha256(text.encode()).hexdigest()


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(raw, kind):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _rms_norm_np(x, w, eps=1e-6):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * w


def _silu_np(x):
    return x * nx._sigmoid(x)


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        d, hd = cfg.d_model, cfg.head_dim
        std, out_std = 0.02, 0.02 / np.sqrt(2 * cfg.n_layers)

        def normal(shape, s):
            return Tensor(rng.normal(0.0, s, shape).astype(dt))

        self.params: dict[str, Tensor] = {"embed": normal((cfg.vocab, d), std)}
        self.ahn: list[AhnParams] = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            self.params[p + "attn_norm"] = Tensor(np.ones(d, dt))
            self.params[p + "w_q"] = normal((d, cfg.n_q_heads * hd), std)
            self.params[p + "w_k"] = normal((d, cfg.n_kv_heads * hd), std)
            self.params[p + "w_v"] = normal((d, cfg.n_kv_heads * hd), std)
            self.params[p + "w_out"] = normal((cfg.n_q_heads * hd, d), out_std)
            self.params[p + "mlp_norm"] = Tensor(np.ones(d, dt))
            self.params[p + "w_gate"] = normal((d, cfg.hidden), std)
            self.params[p + "w_up"] = normal((d, cfg.hidden), std)
            self.params[p + "w_down"] = normal((cfg.hidden, d), out_std)
            ahn = AhnParams(cfg.ahn_variant, d, cfg.n_q_heads, hd, rng=rng, dtype=dt)
            self.ahn.append(ahn)
            for name, t in ahn.arrays.items():
                self.params[f"{p}ahn.{name}"] = t
        self.params["final_norm"] = Tensor(np.ones(d, dt))
        self.params["lm_head"] = normal((d, cfg.vocab), std)
        for name, t in self.params.items():
            t.name = name

    @property
    def variant(self) -> Variant:
        return Variant(self.cfg.ahn_variant)

    def ahn_names(self) -> list[str]:
        return [n for n in self.params if ".ahn." in n]

    def base_names(self) -> list[str]:
        return [n for n in self.params if ".ahn." not in n]

    def ahn_parameter_count(self) -> int:
        return sum(self.params[n].data.size for n in self.ahn_names())

    def attn_config(self, sinks=None, window=None) -> AttentionConfig:
        cfg = self.cfg
        return AttentionConfig(cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim,
                               cfg.sinks if sinks is None else sinks,
                               cfg.window if window is None else window)

    def set_trainable(self, names):
        names = set(names)
        for n, t in self.params.items():
            t.requires_grad = n in names
            t.grad = None

    def embed(self, tokens) -> Tensor:
        return nx.embedding(self.params["embed"], np.asarray(tokens))

    def forward(self, tokens=None, mode: MixerMode | str | None = None, sinks: int | None = None,
                window: int | None = None, embeddings: Tensor | None = None) -> Tensor:
        """Logits for every position; tokens are [L] or [B, L] byte ids."""
        mode = MixerMode.parse(mode.value if isinstance(mode, MixerMode) else (mode or self.cfg.mixer_mode))
        if embeddings is None:
            tokens = np.asarray(tokens)
            if tokens.size == 0:
                raise ValueError("cannot run forward on an empty sequence")
            squeeze = tokens.ndim == 1
            h = self.embed(tokens[None] if squeeze else tokens)
        else:
            squeeze = embeddings.ndim == 2
            h = embeddings.reshape(1, *embeddings.shape) if squeeze else embeddings
        acfg = self.attn_config(sinks, window)
        length = h.shape[1]
        mask = build_mask(length, mode, acfg)
        tables = None
        if self.cfg.rope:
            tables = rope_tables(np.arange(length), self.cfg.head_dim, self.cfg.rope_base, h.dtype)
        for i in range(self.cfg.n_layers):
            h = self._block(i, h, mode, acfg, mask, tables)
        h = nx.rms_norm(h, self.params["final_norm"])
        logits = h @ self.params["lm_head"]
        return logits.reshape(*logits.shape[1:]) if squeeze else logits

    def _block(self, i, h, mode, acfg, mask, tables):
        p = self.params
        pre = f"layers.{i}."
        cfg = self.cfg
        xn = nx.rms_norm(h, p[pre + "attn_norm"])
        q = split_heads(xn @ p[pre + "w_q"], cfg.n_q_heads)
        k = split_heads(xn @ p[pre + "w_k"], cfg.n_kv_heads)
        v = split_heads(xn @ p[pre + "w_v"], cfg.n_kv_heads)
        if tables is not None:
            q, k = nx.rope(q, *tables), nx.rope(k, *tables)
        groups = acfg.groups
        kx, vx, attn_mask = k, v, mask
        if mode.is_ct:
            kx, vx, attn_mask = self._ct_keys(k, v, mask, mode, acfg)
        kx, vx = nx.repeat(kx, groups, axis=1), nx.repeat(vx, groups, axis=1)
        y = attend(q, kx, vx, attn_mask, acfg.scale)
        if mode is MixerMode.SINKS_SWA_AHN:
            y_ahn = ahn_forward(self.ahn[i], xn, q, k, v, acfg.sinks, acfg.window)
            if y_ahn is not None:
                y = y + y_ahn
        h = h + merge_heads(y) @ p[pre + "w_out"]
        xm = nx.rms_norm(h, p[pre + "mlp_norm"])
        act = nx.mul(nx.silu(xm @ p[pre + "w_gate"]), xm @ p[pre + "w_up"])
        return h + act @ p[pre + "w_down"]

    def _ct_keys(self, k, v, mask, mode, acfg):
        cfg = self.cfg
        length = k.shape[2]
        cap = slot_capacity(cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim)
        n_groups, visible = ct_layout(length, acfg.sinks, acfg.window, CT_RATE, cap)
        if n_groups == 0:
            return k, v, mask
        start = acfg.sinks
        stop = start + n_groups * CT_RATE

        def pooled(t):
            b, n, _, hd = t.shape
            rows = t.data[:, :, start:stop].reshape(b, n, n_groups, CT_RATE, hd)
            return Tensor(pool_rows(rows, mode.pool, axis=3))

        # pooled slots are a fixed compression; no gradient flows through them
        kx = nx.concat([k, pooled(k)], axis=2)
        vx = nx.concat([v, pooled(v)], axis=2)
        return kx, vx, np.concatenate([mask, visible], axis=1)

    # ---- streaming ----------------------------------------------------------

    def new_stream(self, mode: MixerMode | str | None = None, sinks: int | None = None,
                   window: int | None = None) -> "StreamState":
        mode = MixerMode.parse(mode.value if isinstance(mode, MixerMode) else (mode or self.cfg.mixer_mode))
        acfg = self.attn_config(sinks, window)
        cfg = self.cfg
        dt = cfg.np_dtype
        layers = []
        for _ in range(cfg.n_layers):
            win = (KvWindow(cfg.n_kv_heads, cfg.head_dim, 0, None, dt) if mode is MixerMode.FULL
                   else KvWindow(cfg.n_kv_heads, cfg.head_dim, acfg.sinks, acfg.window, dt))
            ct = None
            if mode.is_ct:
                ct = CtMemory(CT_RATE, mode.pool, slot_capacity(cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim))
            layers.append(LayerStream(win, CompressedState.zeros(cfg.n_q_heads, cfg.head_dim, dt), ct))
        return StreamState(mode, acfg, layers, arch_hash=cfg.arch_hash())

    def stream_step(self, state: "StreamState", token: int) -> np.ndarray:
        if state.arch_hash != self.cfg.arch_hash() or len(state.layers) != self.cfg.n_layers:
            raise ValueError("stream state was created for a different model configuration")
        cfg = self.cfg
        p = {n: t.data for n, t in self.params.items()}
        pos = state.position
        h = p["embed"][int(token)]
        tables = None
        if cfg.rope:
            cos, sin = rope_tables(np.array([pos]), cfg.head_dim, cfg.rope_base, h.dtype)
            tables = cos[0], sin[0]
        for i, layer in enumerate(state.layers):
            h = self._stream_block(i, layer, h, pos, tables, state)
        h = _rms_norm_np(h, p["final_norm"])
        state.position += 1
        return h @ p["lm_head"]

    def _stream_block(self, i, layer, h, pos, tables, state):
        cfg = self.cfg
        pre = f"layers.{i}."
        p = self.params
        xn = _rms_norm_np(h, p[pre + "attn_norm"].data)
        q = (xn @ p[pre + "w_q"].data).reshape(cfg.n_q_heads, cfg.head_dim)
        k = (xn @ p[pre + "w_k"].data).reshape(cfg.n_kv_heads, cfg.head_dim)
        v = (xn @ p[pre + "w_v"].data).reshape(cfg.n_kv_heads, cfg.head_dim)
        if tables is not None:
            cos, sin = tables
            q = q * cos + nx.rotate_half(q) * sin
            k = k * cos + nx.rotate_half(k) * sin
        evicted = layer.window.append(k, v, pos, xn)
        if evicted is not None:
            state.ahn_updates += 1
            if state.mode is MixerMode.SINKS_SWA_AHN:
                layer.memory = update(layer.memory, evicted, self.ahn[i])
            elif layer.ct is not None:
                layer.ct.push(evicted)
        keys, values = layer.window.keys(), layer.window.values()
        if layer.ct is not None and layer.ct.slots:
            keys = np.concatenate([keys, np.stack(layer.ct.keys(), axis=1)], axis=1)
            values = np.concatenate([values, np.stack(layer.ct.values(), axis=1)], axis=1)
        groups = state.acfg.groups
        keys, values = np.repeat(keys, groups, axis=0), np.repeat(values, groups, axis=0)
        scores = np.einsum("nh,nlh->nl", q, keys) * state.acfg.scale
        y = np.einsum("nl,nlh->nh", nx.masked_softmax(scores, None), values)
        if state.mode is MixerMode.SINKS_SWA_AHN and layer.memory.step > 0:
            y = y + ahn_readout(q, layer.memory, xn, self.ahn[i])
        h = h + y.reshape(-1) @ p[pre + "w_out"].data
        xm = _rms_norm_np(h, p[pre + "mlp_norm"].data)
        act = _silu_np(xm @ p[pre + "w_gate"].data) * (xm @ p[pre + "w_up"].data)
        return h + act @ p[pre + "w_down"].data


@dataclass
class LayerStream:
    window: KvWindow
    memory: CompressedState
    ct: CtMemory | None = None


@dataclass
class StreamState:
    mode: MixerMode
    acfg: AttentionConfig
    layers: list[LayerStream]
    position: int = 0
    ahn_updates: int = 0
    arch_hash: str = field(default="", repr=False)


def stream_step(model: Model, state: StreamState, token: int) -> np.ndarray:
    return model.stream_step(state, token)


def forward(model: Model, tokens, mode=None, **kw) -> Tensor:
    return model.forward(tokens, mode, **kw)
