"""Artificial hippocampus networks: recurrent compression of evicted KV pairs.

All three variants share one recurrence over a key-dim x value-dim state::

    h' = decay * (h - erase * k (k^T h)) + write * k v^T

    GDN     decay=alpha(x)          erase=beta(x)  write=beta(x)
    DN      decay=1                 erase=beta(x)  write=beta(x)
    Mamba2  decay=exp(-delta(x) A)  erase=0        write=delta(x)

The GDN line is alpha (I - beta k^T k) h + beta k^T v rewritten with the decay
factored out. Keys are L2-normalized for DN/GDN only.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import numerics as nx
from ._scan_kernels import scan_backward, scan_forward
from .attention import EvictedPair
from .numerics import NumericError, Tensor


class Variant(str, enum.Enum):
    GDN = "gdn"
    DN = "dn"
    MAMBA2 = "mamba2"

    @property
    def normalizes_keys(self) -> bool:
        return self is not Variant.MAMBA2

    def gate_names(self) -> tuple[str, ...]:
        return {Variant.GDN: ("alpha", "beta", "gamma"),
                Variant.DN: ("beta", "gamma"),
                Variant.MAMBA2: ("delta", "gamma")}[self]


ALPHA_BIAS = 3.0
BETA_BIAS = 0.0
GAMMA_BIAS = -4.0
DELTA_INIT = 0.05


@dataclass
class CompressedState:
    h: np.ndarray  # [N_q, H, H]
    step: int = 0

    @classmethod
    def zeros(cls, n_heads: int, head_dim: int, dtype=np.float64) -> "CompressedState":
        return cls(np.zeros((n_heads, head_dim, head_dim), dtype=dtype), 0)

    @property
    def nbytes(self) -> int:
        return self.h.nbytes


class AhnParams:
    """Per-layer gate projections and the head-grouped output projection.

    GDN owns alpha/beta/gamma projections, DN beta/gamma, Mamba2 delta/gamma
    plus a per-head log decay rate ``a_log`` (A = exp(a_log)).
    """

    def __init__(self, variant: Variant, d_model: int, n_heads: int, head_dim: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.variant = Variant(variant)
        self.d_model, self.n_heads, self.head_dim = d_model, n_heads, head_dim
        self.arrays: dict[str, Tensor] = {}
        bias = {"alpha": ALPHA_BIAS, "beta": BETA_BIAS, "gamma": GAMMA_BIAS,
                "delta": float(np.log(np.expm1(DELTA_INIT)))}
        for g in self.variant.gate_names():
            self.arrays[f"w_{g}"] = Tensor(np.zeros((d_model, n_heads), dtype))
            self.arrays[f"b_{g}"] = Tensor(np.full(n_heads, bias[g], dtype))
        self.arrays["w_o"] = Tensor(np.broadcast_to(np.eye(head_dim, dtype=dtype),
                                                    (n_heads, head_dim, head_dim)).copy())
        if self.variant is Variant.MAMBA2:
            rng = rng or np.random.default_rng(0)
            self.arrays["a_log"] = Tensor(np.log(rng.uniform(1.0, 16.0, n_heads)).astype(dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self.arrays[name]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.arrays.values())

    # numpy-side gates for a single token row x [D]
    def gate(self, name: str, x: np.ndarray) -> np.ndarray:
        z = x @ self.arrays[f"w_{name}"].data + self.arrays[f"b_{name}"].data
        if name == "delta":
            return np.logaddexp(0, z)
        return nx._sigmoid(np.asarray(z, dtype=np.result_type(z, np.float32)))

    def coefficients(self, x: np.ndarray):
        """(decay, erase, write) per head for one evicted token."""
        if self.variant is Variant.GDN:
            alpha, beta = self.gate("alpha", x), self.gate("beta", x)
            return alpha, beta, beta
        if self.variant is Variant.DN:
            beta = self.gate("beta", x)
            return np.ones_like(beta), beta, beta
        delta = self.gate("delta", x)
        a = np.exp(self.arrays["a_log"].data)
        return np.exp(-delta * a), np.zeros_like(delta), delta


def expected_parameter_count(variant: Variant, d_model: int, n_heads: int, head_dim: int) -> int:
    """Gate projections (weights + biases) plus the grouped output projection."""
    gates = len(Variant(variant).gate_names())
    extra = n_heads if Variant(variant) is Variant.MAMBA2 else 0
    return gates * (d_model * n_heads + n_heads) + head_dim * head_dim * n_heads + extra


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite gate or state value")


def delta_step(h: np.ndarray, k: np.ndarray, v: np.ndarray, decay, erase, write) -> np.ndarray:
    """One step of the generic recurrence for stacked heads: h [N,H,H], k/v [N,H], coefficients [N]."""
    decay, erase, write = (np.asarray(c, dtype=h.dtype).reshape(-1, 1, 1) for c in (decay, erase, write))
    kh = np.einsum("na,nab->nb", k, h)
    return decay * (h - erase * k[:, :, None] * kh[:, None, :]) + write * k[:, :, None] * v[:, None, :]


def gdn_step(h, k, v, alpha, beta):
    return delta_step(h, k, v, alpha, beta, beta)


def dn_step(h, k, v, beta):
    return delta_step(h, k, v, np.ones_like(np.asarray(beta, dtype=float)), beta, beta)


def mamba2_step(h, k, v, delta, a):
    delta = np.asarray(delta, dtype=float)
    return delta_step(h, k, v, np.exp(-delta * np.asarray(a)), np.zeros_like(delta), delta)


def _pair_rows(pair: EvictedPair, params: AhnParams, dtype):
    groups = params.n_heads // pair.k.shape[0]
    k = np.repeat(np.asarray(pair.k, dtype=dtype), groups, axis=0)
    v = np.repeat(np.asarray(pair.v, dtype=dtype), groups, axis=0)
    if params.variant.normalizes_keys:
        k = k / np.sqrt((k * k).sum(axis=-1, keepdims=True) + 1e-6)
    return k, v


def _update(state: CompressedState, pair: EvictedPair, params: AhnParams, decay, erase, write):
    _check_finite(decay, erase, write)
    k, v = _pair_rows(pair, params, state.h.dtype)
    return CompressedState(delta_step(state.h, k, v, decay, erase, write), state.step + 1)


def gdn_update(state: CompressedState, pair: EvictedPair, params: AhnParams) -> CompressedState:
    alpha, beta = params.gate("alpha", pair.x), params.gate("beta", pair.x)
    return _update(state, pair, params, alpha, beta, beta)


def dn_update(state: CompressedState, pair: EvictedPair, params: AhnParams) -> CompressedState:
    beta = params.gate("beta", pair.x)
    return _update(state, pair, params, np.ones_like(beta), beta, beta)


def mamba2_update(state: CompressedState, pair: EvictedPair, params: AhnParams) -> CompressedState:
    delta = params.gate("delta", pair.x)
    a = np.exp(params["a_log"].data)
    return _update(state, pair, params, np.exp(-delta * a), np.zeros_like(delta), delta)


UPDATES = {Variant.GDN: gdn_update, Variant.DN: dn_update, Variant.MAMBA2: mamba2_update}


def update(state: CompressedState, pair: EvictedPair, params: AhnParams) -> CompressedState:
    return UPDATES[params.variant](state, pair, params)


def ahn_readout(q: np.ndarray, state: CompressedState, x_t: np.ndarray, params: AhnParams) -> np.ndarray:
    """gamma(x_t) * q h W_o per head; q is [N_q, H]."""
    gamma = params.gate("gamma", x_t)
    if params.variant.normalizes_keys:
        q = q * (1.0 / np.sqrt((q * q).sum(axis=-1, keepdims=True) + 1e-6))
    qh = np.einsum("na,nab->nb", q, state.h)
    return gamma[:, None] * np.einsum("na,nab->nb", qh, params["w_o"].data)


def mix(y_ahn, y_attn):
    return y_ahn + y_attn


def chunked_recurrence(h0: np.ndarray, k: np.ndarray, v: np.ndarray, decay, erase, write,
                       chunk: int = 64) -> np.ndarray:
    """Final state of the recurrence for one head, processing ``chunk`` steps per solve.

    Within a chunk with cumulative decay g_i, the state is g_C h0 + sum_j (g_C/g_j) k_j u_j^T
    where the u rows solve the unit lower-triangular system
    (I + diag(erase) (G o strict_tril(K K^T))) U = diag(write) V - diag(erase * g) K h0.
    """
    h = np.array(h0, dtype=np.result_type(h0, k))
    decay, erase, write = (np.asarray(c, dtype=h.dtype) for c in (decay, erase, write))
    n = k.shape[0]
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        kc, vc = k[sl], v[sl]
        logg = np.cumsum(np.log(decay[sl]))
        g = np.exp(logg)
        ratio = np.exp(np.tril(logg[:, None] - logg[None, :], -1))
        lower = np.tril(kc @ kc.T, -1) * ratio
        t = np.eye(len(kc), dtype=h.dtype) + erase[sl][:, None] * lower
        rhs = write[sl][:, None] * vc - (erase[sl] * g)[:, None] * (kc @ h)
        u = solve_triangular(t, rhs, lower=True, unit_diagonal=True)
        h = g[-1] * h + kc.T @ (np.exp(logg[-1] - logg)[:, None] * u)
    return h


def sequential_recurrence(h0, k, v, decay, erase, write) -> np.ndarray:
    h = np.array(h0, dtype=np.result_type(h0, k))[None]
    for i in range(k.shape[0]):
        h = delta_step(h, k[i:i + 1], v[i:i + 1], decay[i:i + 1], erase[i:i + 1], write[i:i + 1])
    return h[0]


def chunk_scan(pairs: list[EvictedPair], h0: CompressedState, params: AhnParams,
               variant: Variant | None = None, chunk: int = 64) -> CompressedState:
    """Absorb ``pairs`` (position order) into ``h0`` with the chunked solver."""
    variant = Variant(variant or params.variant)
    if variant is not params.variant:
        raise ValueError(f"params are for {params.variant.value}, not {variant.value}")
    if not pairs:
        return CompressedState(h0.h.copy(), h0.step)
    positions = [p.pos for p in pairs]
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ValueError("evicted pairs must be in increasing position order")
    dtype = h0.h.dtype
    rows = [_pair_rows(p, params, dtype) for p in pairs]
    coeffs = [params.coefficients(p.x) for p in pairs]
    k = np.stack([r[0] for r in rows], axis=1)  # [N, n, H]
    v = np.stack([r[1] for r in rows], axis=1)
    decay, erase, write = (np.stack([c[i] for c in coeffs], axis=1).astype(dtype) for i in range(3))
    _check_finite(decay, erase, write)
    h = np.stack([chunked_recurrence(h0.h[n], k[n], v[n], decay[n], erase[n], write[n], chunk)
                  for n in range(params.n_heads)])
    return CompressedState(h, h0.step + len(pairs))


def scan_readout(q: Tensor, k: Tensor, v: Tensor, decay: Tensor, erase: Tensor, write: Tensor) -> Tensor:
    """Differentiable readouts o_i = q_i^T h_i of the recurrence started from h = 0.

    q/k/v are [..., n, H] and the coefficients [..., n]; leading axes are
    independent streams.
    """
    lead = k.shape[:-2]
    n, hd = k.shape[-2:]
    flat = lambda t, tail: np.ascontiguousarray(t.data.reshape((-1,) + tail))  # noqa: E731
    arrays = (flat(q, (n, hd)), flat(k, (n, hd)), flat(v, (n, v.shape[-1])),
              flat(decay, (n,)), flat(erase, (n,)), flat(write, (n,)))
    o, hs = scan_forward(*arrays)

    def backward(g):
        grads = scan_backward(*arrays, hs, np.ascontiguousarray(g.reshape(o.shape)))
        return tuple(gr.reshape(t.shape) for gr, t in zip(grads, (q, k, v, decay, erase, write)))

    return nx.custom(o.reshape(lead + (n, v.shape[-1])), (q, k, v, decay, erase, write), backward)


def gate_logits(params: AhnParams, x: Tensor, name: str) -> Tensor:
    """[B, n, D] -> [B, N_q, n]."""
    z = x @ params[f"w_{name}"] + params[f"b_{name}"]
    return nx.transpose(z, (0, 2, 1))


def recurrence_coefficients(params: AhnParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if params.variant is Variant.GDN:
        alpha = nx.sigmoid(gate_logits(params, x, "alpha"))
        beta = nx.sigmoid(gate_logits(params, x, "beta"))
        return alpha, beta, beta
    if params.variant is Variant.DN:
        beta = nx.sigmoid(gate_logits(params, x, "beta"))
        return Tensor(np.ones(beta.shape, beta.dtype)), beta, beta
    delta = nx.softplus(gate_logits(params, x, "delta"))
    a = nx.exp(params["a_log"])
    decay = nx.exp(nx.scale(nx.mul(delta, nx.expand(a.reshape(-1, 1), delta.shape)), -1.0))
    return decay, Tensor(np.zeros(delta.shape, delta.dtype)), delta


def ahn_forward(params: AhnParams, x: Tensor, q: Tensor, k: Tensor, v: Tensor,
                sinks: int, window: int) -> Tensor | None:
    """Batched AHN branch for one layer.

    x is the normalized layer input [B, L, D]; q [B, N_q, L, H] and k/v
    [B, N_kv, L, H] are the rotated projections the attention uses. Returns
    the per-head readout [B, N_q, L, H] (zero before the first eviction) or
    None when the sequence never leaves the window.
    """
    b, nq, length, hd = q.shape
    n = length - sinks - window
    if n <= 0:
        return None
    groups = nq // k.shape[1]
    ke = nx.repeat(k[:, :, sinks:sinks + n], groups, axis=1)
    ve = nx.repeat(v[:, :, sinks:sinks + n], groups, axis=1)
    if params.variant.normalizes_keys:
        ke = nx.l2_normalize(ke)
    decay, erase, write = recurrence_coefficients(params, x[:, sinks:sinks + n])
    qr = q[:, :, sinks + window:]
    if params.variant.normalizes_keys:
        qr = nx.l2_normalize(qr)
    o = scan_readout(qr, ke, ve, decay, erase, write)
    gamma = nx.sigmoid(gate_logits(params, x[:, sinks + window:], "gamma"))
    o = nx.mul(o, nx.expand(gamma.reshape(b, nq, n, 1), o.shape))
    # grouped output projection: one HxH matrix per head
    o = nx.transpose(o, (1, 0, 2, 3)).reshape(nq, b * n, hd) @ params["w_o"]
    o = nx.transpose(o.reshape(nq, b, n, hd), (1, 0, 2, 3))
    pad = Tensor(np.zeros((b, nq, sinks + window, hd), dtype=o.dtype))
    return nx.concat([pad, o], axis=2)
