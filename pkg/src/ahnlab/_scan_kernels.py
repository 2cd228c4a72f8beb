"""Compiled forward/backward for the generic gated delta recurrence.

    h_i = d_i * (h_{i-1} - b_i k_i (k_i^T h_{i-1})) + w_i k_i v_i^T,   h_0 = 0
    o_i = q_i^T h_i

Arrays are flattened over (batch, head) into a leading group axis G.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def scan_forward(q, k, v, d, b, w):
    G, n, H = k.shape
    Hv = v.shape[2]
    hs = np.zeros((G, n + 1, H, Hv), dtype=k.dtype)
    o = np.zeros((G, n, Hv), dtype=k.dtype)
    u = np.zeros(Hv, dtype=k.dtype)
    for g in range(G):
        h = np.zeros((H, Hv), dtype=k.dtype)
        for i in range(n):
            u[:] = 0.0
            for a in range(H):
                ka = k[g, i, a]
                for j in range(Hv):
                    u[j] += ka * h[a, j]
            di = d[g, i]
            bi = b[g, i]
            wi = w[g, i]
            for a in range(H):
                ka = k[g, i, a]
                for j in range(Hv):
                    h[a, j] = di * (h[a, j] - bi * ka * u[j]) + wi * ka * v[g, i, j]
            hs[g, i + 1] = h
            for a in range(H):
                qa = q[g, i, a]
                for j in range(Hv):
                    o[g, i, j] += qa * h[a, j]
    return o, hs


@njit(cache=True)
def scan_backward(q, k, v, d, b, w, hs, do):
    G, n, H = k.shape
    Hv = v.shape[2]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dd = np.zeros_like(d)
    db = np.zeros_like(b)
    dw = np.zeros_like(w)
    u = np.zeros(Hv, dtype=k.dtype)
    kdp = np.zeros(Hv, dtype=k.dtype)
    for g in range(G):
        gh = np.zeros((H, Hv), dtype=k.dtype)
        for i in range(n - 1, -1, -1):
            hi = hs[g, i + 1]
            hp = hs[g, i]
            for a in range(H):
                qa = q[g, i, a]
                acc = 0.0
                for j in range(Hv):
                    gh[a, j] += qa * do[g, i, j]
                    acc += hi[a, j] * do[g, i, j]
                dq[g, i, a] = acc
            u[:] = 0.0
            for a in range(H):
                ka = k[g, i, a]
                for j in range(Hv):
                    u[j] += ka * hp[a, j]
            di = d[g, i]
            bi = b[g, i]
            wi = w[g, i]
            sd = 0.0
            sw = 0.0
            kdp[:] = 0.0
            for a in range(H):
                ka = k[g, i, a]
                for j in range(Hv):
                    gaj = gh[a, j]
                    sd += gaj * (hp[a, j] - bi * ka * u[j])
                    sw += ka * gaj * v[g, i, j]
                    kdp[j] += ka * di * gaj
            dd[g, i] = sd
            dw[g, i] = sw
            sb = 0.0
            for j in range(Hv):
                sb -= kdp[j] * u[j]
                acc = 0.0
                for a in range(H):
                    acc += gh[a, j] * k[g, i, a]
                dv[g, i, j] = wi * acc
            db[g, i] = sb
            for a in range(H):
                acc1 = 0.0
                acc2 = 0.0
                acc3 = 0.0
                for j in range(Hv):
                    acc1 += di * gh[a, j] * u[j]
                    acc2 += hp[a, j] * kdp[j]
                    acc3 += gh[a, j] * v[g, i, j]
                dk[g, i, a] = -bi * (acc1 + acc2) + wi * acc3
            for a in range(H):
                ka = k[g, i, a]
                for j in range(Hv):
                    gh[a, j] = di * gh[a, j] - bi * ka * kdp[j]
    return dq, dk, dv, dd, db, dw
