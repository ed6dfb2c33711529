"""Independent reference implementations used only by the tests.

Everything here is written with plain Python loops and the ``math`` module
so it shares no code path with the vectorized package.
"""

import math


def _mat(a):
    return a.tolist()


def rms_norm_loop(x, gamma, eps):
    ms = sum(v * v for v in x) / len(x)
    sigma = math.sqrt(ms + eps)
    return [v / sigma * g for v, g in zip(x, gamma)], sigma


def rotate_loop(v, m, base):
    d = len(v)
    out = list(v)
    for j in range(d // 2):
        theta = base ** (-2.0 * j / d)
        c, s = math.cos(m * theta), math.sin(m * theta)
        a, b = v[2 * j], v[2 * j + 1]
        out[2 * j] = c * a - s * b
        out[2 * j + 1] = s * a + c * b
    return out


def vecmat(x, W, cols=None):
    cols = range(len(W[0])) if cols is None else cols
    return [sum(x[r] * W[r][c] for r in range(len(x))) for c in cols]


def silu(s):
    return s / (1.0 + math.exp(-s)) if s > -700 else 0.0


def forward_loop(tokens, weights):
    """Scalar-loop forward pass; returns (logits, residual after every layer)."""
    cfg = weights.config
    d, H, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    E = _mat(weights.embedding)
    x = [list(E[t]) for t in tokens]
    T = len(x)
    resid = [[list(r) for r in x]]
    for layer in weights.layers:
        WQ, WK, WV, WO = _mat(layer.W_Q), _mat(layer.W_K), _mat(layer.W_V), _mat(layer.W_O)
        WG, WU, WD = _mat(layer.W_G), _mat(layer.W_U), _mat(layer.W_D)
        xn = [rms_norm_loop(r, layer.attn_norm.tolist(), cfg.norm_eps)[0] for r in x]
        attn = [[0.0] * d for _ in range(T)]
        for h in range(H):
            cols = range(h * dh, (h + 1) * dh)
            q = [rotate_loop(vecmat(xn[i], WQ, cols), i, cfg.rope_base) for i in range(T)]
            k = [rotate_loop(vecmat(xn[i], WK, cols), i, cfg.rope_base) for i in range(T)]
            v = [vecmat(xn[i], WV, cols) for i in range(T)]
            for i in range(T):
                scores = [sum(q[i][a] * k[j][a] for a in range(dh)) / math.sqrt(dh) for j in range(i + 1)]
                top = max(scores)
                ex = [math.exp(s - top) for s in scores]
                z = sum(ex)
                mean = [sum(ex[j] / z * v[j][a] for j in range(i + 1)) for a in range(dh)]
                for c in range(d):
                    attn[i][c] += sum(mean[a] * WO[h * dh + a][c] for a in range(dh))
        x = [[x[i][c] + attn[i][c] for c in range(d)] for i in range(T)]
        xm = [rms_norm_loop(r, layer.mlp_norm.tolist(), cfg.norm_eps)[0] for r in x]
        for i in range(T):
            g = vecmat(xm[i], WG)
            u = vecmat(xm[i], WU)
            act = [silu(a) * b for a, b in zip(g, u)]
            out = vecmat(act, WD)
            x[i] = [x[i][c] + out[c] for c in range(d)]
        resid.append([list(r) for r in x])
    xf = [rms_norm_loop(r, weights.final_norm.tolist(), cfg.norm_eps)[0] for r in x]
    logits = [vecmat(r, _mat(weights.unembedding)) for r in xf]
    return logits, resid


def head_score_frozen_values(alpha_scores, values, lam):
    """``sum_k softmax(scores)_k (v_k . lam)`` for one query row."""
    top = max(alpha_scores)
    ex = [math.exp(s - top) for s in alpha_scores]
    z = sum(ex)
    return sum(e / z * sum(a * b for a, b in zip(values[k], lam)) for k, e in enumerate(ex))


def central_difference(f, eps):
    return (f(eps) - f(-eps)) / (2 * eps)
