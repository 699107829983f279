"""Straight-line reference implementations used as test oracles.

Written against the definitions only; nothing here imports the kernel or the
metrics it checks.
"""
from __future__ import annotations

import math

import mpmath
import numpy as np

mpmath.mp.dps = 40


def naive_attention(q, k, v, temperature: float = 1.0):
    """Softmax attention with explicit loops in 40-digit arithmetic."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, d = q.shape
    dv = v.shape[1]
    scale = mpmath.sqrt(d) * mpmath.mpf(temperature)
    attn = [[mpmath.mpf(0)] * n for _ in range(n)]
    for i in range(n):
        logits = []
        for j in range(n):
            s = mpmath.mpf(0)
            for c in range(d):
                s += mpmath.mpf(q[i, c]) * mpmath.mpf(k[j, c])
            logits.append(s / scale)
        top = max(logits)
        ex = [mpmath.exp(x - top) for x in logits]
        z = sum(ex)
        for j in range(n):
            attn[i][j] = ex[j] / z
    out = np.zeros((n, dv))
    for i in range(n):
        for c in range(dv):
            s = mpmath.mpf(0)
            for j in range(n):
                s += attn[i][j] * mpmath.mpf(v[j, c])
            out[i, c] = float(s)
    return out, np.array([[float(x) for x in row] for row in attn])


def coords(index, F, H, W, T, prefix):
    """Classify a flat index by walking the sequence token by token."""
    pos = 0
    if prefix:
        for t in range(T):
            if pos == index:
                return ("text", t)
            pos += 1
    for f in range(F):
        for r in range(H):
            for c in range(W):
                if pos == index:
                    return ("vision", f, r, c)
                pos += 1
    if not prefix:
        for t in range(T):
            if pos == index:
                return ("text", t)
            pos += 1
    raise IndexError(index)


def brute_band_mass(m, F, H, W, T=0, prefix=False):
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    band = [0.0] * F
    text = 0.0
    rows = 0
    for i in range(n):
        ci = coords(i, F, H, W, T, prefix)
        if ci[0] != "vision":
            continue
        rows += 1
        for j in range(n):
            cj = coords(j, F, H, W, T, prefix)
            if cj[0] == "text":
                text += m[i, j]
            else:
                band[abs(ci[1] - cj[1])] += m[i, j]
    return [b / rows for b in band], text / rows


def brute_text_share(m, F, H, W, T, prefix=False):
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    share = [0.0] * T
    rows = 0
    for i in range(n):
        if coords(i, F, H, W, T, prefix)[0] != "vision":
            continue
        rows += 1
        for j in range(n):
            cj = coords(j, F, H, W, T, prefix)
            if cj[0] == "text":
                share[cj[1]] += m[i, j]
    share = [s / rows for s in share]
    total = sum(share)
    return share, (share[0] / total if total > 0 else 0.0)


def brute_sink(m, tau_w, tau_q):
    """Column with the most heavy rows, if more than tau_q of rows are heavy."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    best, best_count = None, -1
    for j in range(n):
        count = sum(1 for i in range(n) if m[i, j] >= tau_w)
        if count > tau_q * n and count > best_count:
            best, best_count = j, count
    return best


def hand_norms(v, position):
    rows = [math.sqrt(sum(float(x) ** 2 for x in row)) for row in np.asarray(v, dtype=np.float64)]
    sink = rows[position]
    others = [r for i, r in enumerate(rows) if i != position]
    mean = sum(others) / len(others)
    return sink, mean, (sink / mean if mean else 1.0)


def ema_closed_form(theta0, thetas, beta):
    """avg_t = beta^t avg_0 + sum_s (1-beta) beta^(t-s) theta_s, summed directly."""
    t = len(thetas)
    total = beta ** t * theta0
    for s, th in enumerate(thetas, start=1):
        total += (1 - beta) * beta ** (t - s) * th
    return total


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g
