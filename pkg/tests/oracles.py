"""Brute-force reference implementations used by the test-suite.

These deliberately use explicit Python loops over pixels / tokens and share no
code with the package.
"""
import math

import numpy as np


def masked_mean(F, M):
    C, H, W = F.shape
    acc = np.zeros(C)
    n = 0.0
    for i in range(H):
        for j in range(W):
            if M[i, j]:
                acc += F[:, i, j] * M[i, j]
                n += M[i, j]
    return acc / n


def cosine(a, b, eps=1e-8):
    return float(a @ b) / (math.sqrt(a @ a) * math.sqrt(b @ b) + eps)


def similarity(Ft, Fr):
    C, H, W = Ft.shape
    S = np.zeros((H * W, H * W))
    for p in range(H * W):
        for q in range(H * W):
            S[p, q] = cosine(Ft[:, p // W, p % W], Fr[:, q // W, q % W])
    return S


def minmax(raw):
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def pseudo(S, M):
    H, W = M.shape
    raw = np.zeros((H, W))
    cols = [q for q in range(H * W) if M[q // W, q % W]]
    for p in range(H * W):
        raw[p // W, p % W] = sum(S[p, q] for q in cols) / len(cols)
    return minmax(raw)


def text_attention(F, t):
    C, H, W = F.shape
    raw = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            raw[i, j] = cosine(F[:, i, j], t)
    return minmax(raw)


def enhance(F, P, t, m1, m2, Wt, b):
    C, H, W = F.shape
    out = np.zeros((Wt.shape[0], H, W))
    for i in range(H):
        for j in range(W):
            parts = [F[:, i, j], P]
            if t is not None:
                parts.append(t)
            parts.append([m1[i, j]])
            if m2 is not None:
                parts.append([m2[i, j]])
            out[:, i, j] = Wt @ np.concatenate(parts) + b
    return out


def pointwise(F, Wt, b):
    C, H, W = F.shape
    out = np.zeros((Wt.shape[0], H, W))
    for i in range(H):
        for j in range(W):
            out[:, i, j] = Wt @ F[:, i, j] + b
    return out


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * g + b


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def mha(q_rows, kv_rows, p, heads):
    """Multi-head attention one query at a time. ``p`` maps names to numpy arrays."""
    d = p["q_w"].shape[0]
    dh = d // heads
    out = []
    for qi in q_rows:
        qv = p["q_w"] @ qi + p["q_b"]
        ks = [p["k_w"] @ k + p["k_b"] for k in kv_rows]
        vs = [p["v_w"] @ k + p["v_b"] for k in kv_rows]
        head_out = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            logits = np.array([qv[sl] @ k[sl] / math.sqrt(dh) for k in ks])
            a = softmax(logits)
            head_out.append(sum(a[n] * vs[n][sl] for n in range(len(vs))))
        out.append(p["o_w"] @ np.concatenate(head_out) + p["o_b"])
    return np.array(out)


def gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def block(x_rows, ctx_rows, p, heads, cross):
    normed = np.array([layer_norm(r, p["nq_g"], p["nq_b"]) for r in x_rows])
    if cross:
        kv = np.array([layer_norm(r, p["nkv_g"], p["nkv_b"]) for r in ctx_rows])
    else:
        kv = normed
    x = x_rows + mha(normed, kv, p, heads)
    out = []
    for r in x:
        h = layer_norm(r, p["nf_g"], p["nf_b"])
        out.append(r + p["f2_w"] @ gelu(p["f1_w"] @ h + p["f1_b"]) + p["f2_b"])
    return np.array(out)


def bce(p, y, eps=1e-7):
    total = 0.0
    flat_p, flat_y = np.ravel(p), np.ravel(y)
    for pj, yj in zip(flat_p, flat_y):
        pj = min(max(pj, eps), 1 - eps)
        total += yj * math.log(pj) + (1 - yj) * math.log(1 - pj)
    return -total / len(flat_p)


def dice(p, y):
    inter = sum(a * b for a, b in zip(np.ravel(p), np.ravel(y)))
    return 1 - (2 * inter + 1) / (float(np.sum(p)) + float(np.sum(y)) + 1)
