import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ahnlab import numerics as nx
from ahnlab.ahn import (AhnParams, CompressedState, Variant, ahn_forward, ahn_readout, chunk_scan,
                        chunked_recurrence, delta_step, dn_step, dn_update, expected_parameter_count,
                        gdn_step, gdn_update, mamba2_step, mamba2_update, mix, scan_readout,
                        sequential_recurrence, update)
from ahnlab.attention import EvictedPair
from ahnlab.numerics import NumericError, Tensor

VARIANTS = list(Variant)
N, H, D = 2, 4, 6


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def live_params(variant, rng, n_heads=N, head_dim=H, d_model=D):
    p = AhnParams(variant, d_model, n_heads, head_dim, rng, dtype=np.float64)
    for name, t in p.arrays.items():
        if name.startswith("w_") and name != "w_o":
            t.data = rng.standard_normal(t.shape) * 0.5
    p["w_o"].data = rng.standard_normal((n_heads, head_dim, head_dim))
    p["b_gamma"].data = np.zeros(n_heads)
    return p


def random_pairs(rng, n, n_kv=N, head_dim=H, d_model=D, start=0):
    return [EvictedPair(rng.standard_normal((n_kv, head_dim)), rng.standard_normal((n_kv, head_dim)),
                        rng.standard_normal(d_model), start + i) for i in range(n)]


def h_oracle(h, k, v, decay, erase, write):
    """Explicit H x H matrix arithmetic for one head."""
    eye = np.eye(len(k))
    return decay * (eye - erase * np.outer(k, k)) @ h + write * np.outer(k, v)


# ---- single-step examples ---------------------------------------------------

def test_gdn_identity_when_alpha_one_beta_zero():
    rng = np.random.default_rng(0)
    h, k, v = rng.standard_normal((1, H, H)), unit(rng.standard_normal((1, H))), rng.standard_normal((1, H))
    np.testing.assert_array_equal(gdn_step(h, k, v, [1.0], [0.0]), h)


def test_gdn_pure_write():
    rng = np.random.default_rng(1)
    k, v = unit(rng.standard_normal((1, H))), rng.standard_normal((1, H))
    np.testing.assert_allclose(gdn_step(np.zeros((1, H, H)), k, v, [1.0], [1.0])[0], np.outer(k[0], v[0]))


@given(st.integers(0, 2**31))
def test_gdn_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    h, k, v = rng.standard_normal((H, H)), unit(rng.standard_normal(H)), rng.standard_normal(H)
    alpha, beta = rng.uniform(0, 1, 2)
    out = gdn_step(h[None], k[None], v[None], [alpha], [beta])[0]
    np.testing.assert_allclose(out, h_oracle(h, k, v, alpha, beta, beta), atol=1e-12)


@given(st.integers(0, 2**31))
def test_dn_equals_gdn_with_unit_alpha(seed):
    rng = np.random.default_rng(seed)
    h, k, v = rng.standard_normal((N, H, H)), unit(rng.standard_normal((N, H))), rng.standard_normal((N, H))
    beta = rng.uniform(0, 1, N)
    assert np.array_equal(dn_step(h, k, v, beta), gdn_step(h, k, v, np.ones(N), beta))


def test_dn_zero_beta_is_identity_and_rank_one_readout():
    rng = np.random.default_rng(2)
    h, k, v, q = (rng.standard_normal(s) for s in ((1, H, H), (1, H), (1, H), (H,)))
    k = unit(k)
    np.testing.assert_array_equal(dn_step(h, k, v, [0.0]), h)
    written = dn_step(np.zeros((1, H, H)), k, v, [1.0])[0]
    np.testing.assert_allclose(q @ written, (q @ k[0]) * v[0], atol=1e-14)


def test_mamba2_examples():
    rng = np.random.default_rng(3)
    h, k, v = rng.standard_normal((1, H, H)), rng.standard_normal((1, H)), rng.standard_normal((1, H))
    np.testing.assert_array_equal(mamba2_step(h, k, v, [0.0], 2.0), h)
    erased = mamba2_step(h, k, v, [0.3], 1e3)[0]
    np.testing.assert_allclose(erased, 0.3 * np.outer(k[0], v[0]), atol=1e-12)
    out = mamba2_step(h, k, v, [0.3], 2.0)[0]
    np.testing.assert_allclose(out, h_oracle(h[0], k[0], v[0], np.exp(-0.6), 0.0, 0.3), atol=1e-12)


def test_mamba2_decay_is_key_independent():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((1, H, H))
    for _ in range(3):
        out = mamba2_step(h, rng.standard_normal((1, H)), np.zeros((1, H)), [0.7], 1.5)
        np.testing.assert_allclose(out, np.exp(-1.05) * h, atol=1e-14)


@given(st.integers(0, 2**31))
def test_gdn_update_spectral_norm_bounded_by_alpha(seed):
    rng = np.random.default_rng(seed)
    k = unit(rng.standard_normal(H))
    alpha, beta = rng.uniform(0, 1, 2)
    m = alpha * (np.eye(H) - beta * np.outer(k, k))
    x = rng.standard_normal(H)
    for _ in range(200):
        x = m.T @ (m @ x)
        x /= np.linalg.norm(x)
    sigma = np.sqrt(np.linalg.norm(m.T @ (m @ x)))
    assert sigma <= alpha + 1e-12


# ---- parameter updates on EvictedPair ---------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_updates_increment_step_and_keep_shape(variant):
    rng = np.random.default_rng(5)
    p = live_params(variant, rng)
    s = CompressedState.zeros(N, H)
    for pair in random_pairs(rng, 3):
        s = update(s, pair, p)
    assert s.step == 3 and s.h.shape == (N, H, H)


def test_variant_update_functions_match_dispatch():
    rng = np.random.default_rng(6)
    pair = random_pairs(rng, 1)[0]
    h0 = CompressedState(rng.standard_normal((N, H, H)))
    for fn, variant in ((gdn_update, Variant.GDN), (dn_update, Variant.DN), (mamba2_update, Variant.MAMBA2)):
        p = live_params(variant, rng)
        assert np.array_equal(fn(h0, pair, p).h, update(h0, pair, p).h)


def test_update_rejects_non_finite_gate():
    rng = np.random.default_rng(7)
    p = live_params(Variant.GDN, rng)
    pair = random_pairs(rng, 1)[0]
    pair.x[0] = np.nan
    with pytest.raises(NumericError):
        update(CompressedState.zeros(N, H), pair, p)


def test_state_size_constant():
    rng = np.random.default_rng(8)
    p = live_params(Variant.GDN, rng)
    s1 = update(CompressedState.zeros(N, H), random_pairs(rng, 1)[0], p)
    s2 = chunk_scan(random_pairs(rng, 10_000), CompressedState.zeros(N, H), p)
    assert s1.nbytes == s2.nbytes == N * H * H * 8
    assert s2.step == 10_000


@pytest.mark.parametrize("variant", VARIANTS)
def test_parameter_count(variant):
    p = AhnParams(variant, D, N, H)
    assert p.parameter_count() == expected_parameter_count(variant, D, N, H)
    gates = len(variant.gate_names())
    assert expected_parameter_count(variant, D, N, H) == gates * D * N + H * H * N + gates * N + (
        N if variant is Variant.MAMBA2 else 0)


def test_gates_in_range_and_init_nearly_closed():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(D) * 5
    p = live_params(Variant.GDN, rng)
    for g in ("alpha", "beta", "gamma"):
        assert np.all((p.gate(g, x) > 0) & (p.gate(g, x) < 1))
    assert np.all(live_params(Variant.MAMBA2, rng).gate("delta", x) > 0)
    fresh = AhnParams(Variant.GDN, D, N, H, dtype=np.float64)
    np.testing.assert_allclose(fresh.gate("gamma", x), 1 / (1 + np.exp(4.0)))


# ---- readout ------------------------------------------------------------------

def test_readout_zero_state_and_closed_gate():
    rng = np.random.default_rng(10)
    p = live_params(Variant.GDN, rng)
    q, x = rng.standard_normal((N, H)), rng.standard_normal(D)
    assert not ahn_readout(q, CompressedState.zeros(N, H), x, p).any()
    p["b_gamma"].data = np.full(N, -np.inf)
    assert not ahn_readout(q, CompressedState(rng.standard_normal((N, H, H))), x, p).any()


def test_readout_rank_one_identity():
    rng = np.random.default_rng(11)
    p = AhnParams(Variant.GDN, D, N, H, dtype=np.float64)
    p["b_gamma"].data = np.full(N, np.inf)  # gamma = 1
    k, v = unit(rng.standard_normal((N, H))), rng.standard_normal((N, H))
    h = np.einsum("na,nb->nab", k, v)
    # the query is normalized with the same 1e-6 guard as the keys
    want = v / np.sqrt(1 + 1e-6)
    np.testing.assert_allclose(ahn_readout(k, CompressedState(h), np.zeros(D), p), want, atol=1e-12)
    np.testing.assert_allclose(ahn_readout(5 * k, CompressedState(h), np.zeros(D), p), v, atol=1e-7)


@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_readout_query_scaling(seed, c):
    rng = np.random.default_rng(seed)
    q, x, h = unit(rng.standard_normal((N, H))), rng.standard_normal(D), rng.standard_normal((N, H, H))
    for variant in VARIANTS:
        p = live_params(variant, rng)
        base = ahn_readout(q, CompressedState(h), x, p)
        scaled = ahn_readout(c * q, CompressedState(h), x, p)
        want = base if Variant(variant).normalizes_keys else c * base
        # the 1e-6 guard inside the norm shifts a unit row's scale by 1e-6/2 * |1 - 1/c^2| to first order
        np.testing.assert_allclose(scaled, want, rtol=0.51e-6 * abs(1 - 1 / c**2) + 1e-12, atol=1e-12)


@given(st.integers(0, 2**31))
def test_readout_linear_in_state(seed):
    rng = np.random.default_rng(seed)
    p = live_params(Variant.GDN, rng)
    q, x = rng.standard_normal((N, H)), rng.standard_normal(D)
    h1, h2 = rng.standard_normal((2, N, H, H))
    a, b = rng.standard_normal(2)
    lhs = ahn_readout(q, CompressedState(a * h1 + b * h2), x, p)
    rhs = a * ahn_readout(q, CompressedState(h1), x, p) + b * ahn_readout(q, CompressedState(h2), x, p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_mix_is_sum_and_commutes_with_projection():
    rng = np.random.default_rng(12)
    y1, y2, w = rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal((8, 5))
    np.testing.assert_array_equal(mix(np.zeros(8), y2), y2)
    np.testing.assert_array_equal(mix(y1, np.zeros(8)), y1)
    np.testing.assert_allclose(mix(y1, y2) @ w, y1 @ w + y2 @ w, atol=1e-12)


# ---- chunked solver -----------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_chunk_scan_edge_cases(variant):
    rng = np.random.default_rng(13)
    p = live_params(variant, rng)
    h0 = CompressedState(rng.standard_normal((N, H, H)))
    assert np.array_equal(chunk_scan([], h0, p).h, h0.h)
    pair = random_pairs(rng, 1)[0]
    np.testing.assert_allclose(chunk_scan([pair], h0, p).h, update(h0, pair, p).h, atol=1e-13)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_chunk_scan_matches_sequential_fold(variant, dtype, tol):
    rng = np.random.default_rng(14)
    p = live_params(variant, rng)
    pairs = random_pairs(rng, 64)
    h0 = CompressedState(rng.standard_normal((N, H, H)).astype(dtype) * 0.1)
    fold = h0
    for pair in pairs:
        fold = update(fold, pair, p)
    out = chunk_scan(pairs, h0, p, chunk=8)
    scale = max(1.0, np.abs(fold.h).max())
    assert np.abs(out.h - fold.h).max() <= tol * scale
    assert out.step == fold.step == 64


def test_chunk_scan_rejects_out_of_order_and_wrong_variant():
    rng = np.random.default_rng(15)
    p = live_params(Variant.GDN, rng)
    pairs = random_pairs(rng, 3)
    pairs[1], pairs[2] = pairs[2], pairs[1]
    with pytest.raises(ValueError):
        chunk_scan(pairs, CompressedState.zeros(N, H), p)
    with pytest.raises(ValueError):
        chunk_scan(random_pairs(rng, 2), CompressedState.zeros(N, H), p, variant=Variant.DN)


@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 16))
def test_chunked_recurrence_chunk_size_invariant(seed, n, chunk):
    rng = np.random.default_rng(seed)
    k = unit(rng.standard_normal((n, H)))
    v = rng.standard_normal((n, H))
    decay, erase = rng.uniform(0.2, 1, n), rng.uniform(0, 1, n)
    h0 = rng.standard_normal((H, H))
    a = chunked_recurrence(h0, k, v, decay, erase, erase, chunk)
    b = sequential_recurrence(h0, k, v, decay, erase, erase)
    np.testing.assert_allclose(a, b, atol=1e-11)


# ---- differentiable path --------------------------------------------------------

def test_scan_readout_matches_fold():
    rng = np.random.default_rng(16)
    n = 7
    q, k, v = rng.standard_normal((n, H)), unit(rng.standard_normal((n, H))), rng.standard_normal((n, H))
    decay, erase = rng.uniform(0.3, 1, n), rng.uniform(0, 1, n)
    out = scan_readout(*(Tensor(a) for a in (q, k, v, decay, erase, erase))).data
    h = np.zeros((1, H, H))
    for i in range(n):
        h = delta_step(h, k[i:i + 1], v[i:i + 1], decay[i:i + 1], erase[i:i + 1], erase[i:i + 1])
        np.testing.assert_allclose(out[i], q[i] @ h[0], atol=1e-12)


def test_gradient_through_chained_updates_and_readout():
    rng = np.random.default_rng(17)
    n = 4
    arrays = [rng.standard_normal((n, H)) for _ in range(3)] + [rng.uniform(0.3, 0.9, n) for _ in range(3)]
    wt = Tensor(rng.standard_normal((n, H)))
    for slot in range(6):
        def f(t, slot=slot):
            args = [t if i == slot else Tensor(a) for i, a in enumerate(arrays)]
            return nx.sum_(nx.mul(scan_readout(*args), wt))
        assert nx.grad_check(f, Tensor(arrays[slot].copy())) < 1e-5


@pytest.mark.parametrize("variant", VARIANTS)
def test_batched_branch_matches_streaming_readout(variant):
    rng = np.random.default_rng(18)
    sinks, window, length = 1, 2, 8
    p = live_params(variant, rng)
    x = rng.standard_normal((1, length, D))
    q = rng.standard_normal((1, N, length, H))
    k = rng.standard_normal((1, 1, length, H))
    v = rng.standard_normal((1, 1, length, H))
    out = ahn_forward(p, Tensor(x), Tensor(q), Tensor(k), Tensor(v), sinks, window).data
    assert not out[0, :, :sinks + window].any()
    state = CompressedState.zeros(N, H)
    for t in range(sinks + window, length):
        e = t - window
        state = update(state, EvictedPair(k[0, :, e], v[0, :, e], x[0, e], e), p)
        np.testing.assert_allclose(out[0, :, t], ahn_readout(q[0, :, t], state, x[0, t], p), atol=1e-12)
    assert ahn_forward(p, Tensor(x[:, :3]), Tensor(q[:, :, :3]), Tensor(k[:, :, :3]), Tensor(v[:, :, :3]),
                       sinks, window) is None
