"""Dual-path target propagation and attribution scoring.

A target is a ``(T, d)`` matrix of per-position directions in the residual
stream. It starts as the (norm-folded) unembedding column of the target
token at the attribution position and is pushed down through each layer:
first the GLU (up and gate paths), then attention (value, query and key
paths), each path weighted by :class:`PathWeights`. Scores are dot
products of cached component writes with the target at the site they
write to.

Layers are 0-indexed here: layer ``l`` reads ``resid[l]`` and writes
``resid_mid[l]`` (attention) and ``resid[l + 1]`` (GLU).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ActivationCache, ModelWeights, forward, logistic, rope_frequencies


@dataclass(frozen=True)
class PathWeights:
    q: float = 0.25
    k: float = 0.25
    v: float = 0.5
    gate: float = 0.5
    up: float = 0.5

    def __post_init__(self):
        for name in ("q", "k", "v", "gate", "up"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"mu_{name}={val} outside [0, 1]")
        if abs(self.q + self.k + self.v - 1.0) > 1e-12:
            raise ValueError("mu_q + mu_k + mu_v must equal 1")
        if abs(self.gate + self.up - 1.0) > 1e-12:
            raise ValueError("mu_gate + mu_up must equal 1")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.q, self.k, self.v, self.gate, self.up)

    def to_dict(self) -> dict:
        return dict(zip(("mu_q", "mu_k", "mu_v", "mu_gate", "mu_up"), self.as_tuple()))


SENSITIVITY_KINDS = ("control-content", "attention", "query-key", "mlp")


def sensitivity_config(kind: str, p: float = 0.5) -> PathWeights:
    """Path weights for one of the four sensitivity sweeps at value ``p``.

    ``control-content`` moves both modules from control (p=0) to content
    (p=1); ``attention`` and ``mlp`` sweep one module while holding the other
    balanced; ``query-key`` keeps the value path at 0.5 and trades query
    against key.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if kind == "control-content":
        return PathWeights((1 - p) / 2, (1 - p) / 2, p, 1 - p, p)
    if kind == "attention":
        return PathWeights((1 - p) / 2, (1 - p) / 2, p, 0.5, 0.5)
    if kind == "query-key":
        return PathWeights(p / 2, (1 - p) / 2, 0.5, 0.5, 0.5)
    if kind == "mlp":
        return PathWeights(0.25, 0.25, 0.5, 1 - p, p)
    raise ValueError(f"unknown sensitivity kind {kind!r}; expected one of {SENSITIVITY_KINDS}")


@dataclass(frozen=True)
class TargetSpec:
    token: int
    position: int

    def validate(self, vocab_size: int, seq_len: int) -> None:
        if not 0 <= self.token < vocab_size:
            raise ValueError(f"target token {self.token} out of range [0, {vocab_size})")
        if not 0 <= self.position < seq_len:
            raise ValueError(f"position {self.position} out of range [0, {seq_len})")


@dataclass
class EffectiveTargets:
    """``resid[l]`` is the target at X^(l) (``resid[L]`` the initial one,
    ``resid[0]`` the embedding-level target); ``mid[l]`` the target at the
    attention output of layer ``l``."""

    resid: np.ndarray  # (L+1, T, d)
    mid: np.ndarray  # (L, T, d)

    @property
    def initial(self) -> np.ndarray:
        return self.resid[-1]

    @property
    def embedding(self) -> np.ndarray:
        return self.resid[0]


@dataclass
class AttributionScores:
    token_scores: np.ndarray  # (T,)
    head_scores: np.ndarray  # (L, H)
    neuron_scores: np.ndarray  # (L, F)
    head_positions: np.ndarray  # (L, H, T)
    neuron_positions: np.ndarray  # (L, T, F)
    mu: PathWeights
    spec: TargetSpec

    def component_scores(self) -> np.ndarray:
        """Heads then neurons, layer-major: ``[l0 heads, l0 neurons, l1 heads, ...]``."""
        return np.concatenate([self.head_scores, self.neuron_scores], axis=1).ravel()


# --- initialization ------------------------------------------------------------


def init_target(spec: TargetSpec, weights: ModelWeights, cache: ActivationCache) -> np.ndarray:
    """Initial target with the final RMSNorm folded in at the cached sigma.

    Row ``spec.position`` is ``final_norm * W_UE[:, token] / sigma_final``, so
    its dot product with X^(L) is the logit exactly; other rows are zero.
    """
    T, d = cache.seq_len, weights.config.d_model
    spec.validate(weights.config.vocab_size, T)
    target = np.zeros((T, d))
    pos = spec.position
    target[pos] = weights.final_norm * weights.unembedding[:, spec.token] / cache.sigma_final[pos]
    return target


# --- GLU paths -----------------------------------------------------------------


def _fold(cache: ActivationCache, l: int, site: str) -> np.ndarray:
    """Per-position effective-weight factor ``gamma / sigma`` as (T, d)."""
    layer = cache.weights.layers[l]
    if site == "attn":
        return layer.attn_norm[None, :] / cache.sigma_attn[l][:, None]
    return layer.mlp_norm[None, :] / cache.sigma_mlp[l][:, None]


def propagate_glu_up(cache: ActivationCache, l: int, n: int, pos: int, t) -> np.ndarray:
    """Up path of neuron ``n`` with the gate activation frozen."""
    layer = cache.weights.layers[l]
    lam = cache.neuron_scale[l, n] * (layer.W_D[n] @ t)
    w_eff = layer.W_U[:, n] * layer.mlp_norm / cache.sigma_mlp[l, pos]
    return w_eff * cache.gate_act[l, pos, n] * lam


def gate_ratio(s) -> np.ndarray:
    """``SiLU(s) / s`` written as ``logistic(s)``; finite at s = 0."""
    return logistic(s)


def propagate_glu_gate(cache: ActivationCache, l: int, n: int, pos: int, t) -> np.ndarray:
    """Gate path of neuron ``n`` with the up value frozen."""
    layer = cache.weights.layers[l]
    lam = cache.neuron_scale[l, n] * (layer.W_D[n] @ t)
    w_eff = layer.W_G[:, n] * layer.mlp_norm / cache.sigma_mlp[l, pos]
    ratio = gate_ratio(np.array([cache.gate_pre[l, pos, n]]))[0]
    return w_eff * ratio * cache.up[l, pos, n] * lam


def propagate_glu(cache: ActivationCache, l: int, t: np.ndarray, mu: PathWeights) -> np.ndarray:
    """Summed GLU propagation over all neurons and positions, ``(T, d)``."""
    layer = cache.weights.layers[l]
    lam = (t @ layer.W_D.T) * cache.neuron_scale[l]  # (T, F)
    coef_up = mu.up * cache.gate_act[l] * lam
    coef_gate = mu.gate * gate_ratio(cache.gate_pre[l]) * cache.up[l] * lam
    return (coef_up @ layer.W_U.T + coef_gate @ layer.W_G.T) * _fold(cache, l, "mlp")


# --- attention paths -----------------------------------------------------------


def _head_slices(cache: ActivationCache, l: int, h: int):
    config = cache.config
    dh = config.head_dim
    layer = cache.weights.layers[l]
    cols = slice(h * dh, (h + 1) * dh)
    return layer.W_Q[:, cols], layer.W_K[:, cols], layer.W_V[:, cols], layer.W_O[cols]


def projected_targets(cache: ActivationCache, l: int, h: int, t_mid: np.ndarray) -> np.ndarray:
    """``lambda_i = W_O^(h) t_mid,i`` for every position, ``(T, d_h)``."""
    W_O = _head_slices(cache, l, h)[3]
    return cache.head_scale[l, h] * (t_mid @ W_O.T)


def softmax_delta(cache: ActivationCache, l: int, h: int, lam: np.ndarray) -> np.ndarray:
    """Sensitivity of the frozen-value head score to each attention logit.

    ``delta[i, j] = alpha[i, j] * (v_j - mean_i) . lambda_i``; zero above the
    diagonal because alpha is.
    """
    alpha = cache.alpha[l, h]
    values = cache.values[l, h]
    means = cache.means[l, h]
    vl = lam @ values.T  # [i, j] = lambda_i . v_j
    ml = np.einsum("id,id->i", means, lam)
    return alpha * (vl - ml[:, None])


def propagate_attention_value(cache: ActivationCache, l: int, h: int, t_mid: np.ndarray) -> np.ndarray:
    lam = projected_targets(cache, l, h, t_mid)
    W_V = _head_slices(cache, l, h)[2]
    pooled = cache.alpha[l, h].T @ lam  # row j = sum_{i>=j} alpha_ij lambda_i
    return (pooled @ W_V.T) * _fold(cache, l, "attn")


def _unrotate(cache: ActivationCache, vecs: np.ndarray) -> np.ndarray:
    T, dh = vecs.shape
    theta = rope_frequencies(dh, cache.config.rope_base)
    angle = -np.arange(T, dtype=np.float64)[:, None] * theta
    cos, sin = np.cos(angle), np.sin(angle)
    out = np.empty_like(vecs)
    out[:, 0::2] = vecs[:, 0::2] * cos - vecs[:, 1::2] * sin
    out[:, 1::2] = vecs[:, 0::2] * sin + vecs[:, 1::2] * cos
    return out


def propagate_attention_query(cache: ActivationCache, l: int, h: int, delta: np.ndarray) -> np.ndarray:
    scale = 1.0 / math.sqrt(cache.config.head_dim)
    W_Q = _head_slices(cache, l, h)[0]
    pulled = _unrotate(cache, delta @ cache.k_rot[l, h] * scale)
    return (pulled @ W_Q.T) * _fold(cache, l, "attn")


def propagate_attention_key(cache: ActivationCache, l: int, h: int, delta: np.ndarray) -> np.ndarray:
    scale = 1.0 / math.sqrt(cache.config.head_dim)
    W_K = _head_slices(cache, l, h)[1]
    pulled = _unrotate(cache, delta.T @ cache.q_rot[l, h] * scale)
    return (pulled @ W_K.T) * _fold(cache, l, "attn")


def propagate_head(cache: ActivationCache, l: int, h: int, t_mid: np.ndarray, mu: PathWeights) -> np.ndarray:
    out = mu.v * propagate_attention_value(cache, l, h, t_mid)
    if mu.q or mu.k:
        delta = softmax_delta(cache, l, h, projected_targets(cache, l, h, t_mid))
        if mu.q:
            out += mu.q * propagate_attention_query(cache, l, h, delta)
        if mu.k:
            out += mu.k * propagate_attention_key(cache, l, h, delta)
    return out


def propagate_attention(cache: ActivationCache, l: int, t_mid: np.ndarray, mu: PathWeights) -> np.ndarray:
    """Summed attention propagation over all heads, batched across heads."""
    config = cache.config
    H, dh = config.n_heads, config.head_dim
    layer = cache.weights.layers[l]
    W_O = layer.W_O.reshape(H, dh, -1)
    lam = cache.head_scale[l][:, None, None] * np.einsum("td,hkd->htk", t_mid, W_O)  # (H, T, dh)
    alpha = cache.alpha[l]
    # per-head pulled-back vectors in head space, mapped through W^T at the end
    pull_v = alpha.transpose(0, 2, 1) @ lam
    total = np.einsum("htk,dhk->td", pull_v, layer.W_V.reshape(-1, H, dh)) * mu.v
    if mu.q or mu.k:
        vl = lam @ cache.values[l].transpose(0, 2, 1)
        ml = np.einsum("htk,htk->ht", cache.means[l], lam)
        delta = alpha * (vl - ml[:, :, None])
        scale = 1.0 / math.sqrt(dh)
        if mu.q:
            pq = np.stack([_unrotate(cache, m) for m in delta @ cache.k_rot[l] * scale])
            total += mu.q * np.einsum("htk,dhk->td", pq, layer.W_Q.reshape(-1, H, dh))
        if mu.k:
            pk = np.stack([_unrotate(cache, m) for m in delta.transpose(0, 2, 1) @ cache.q_rot[l] * scale])
            total += mu.k * np.einsum("htk,dhk->td", pk, layer.W_K.reshape(-1, H, dh))
    return total * _fold(cache, l, "attn")


def propagate_layer(cache: ActivationCache, l: int, mu: PathWeights, t_in: np.ndarray):
    """One layer top-down: returns ``(t_mid, t_out)``."""
    t_mid = t_in + propagate_glu(cache, l, t_in, mu)
    t_out = t_mid + propagate_attention(cache, l, t_mid, mu)
    return t_mid, t_out


def propagate_all(cache: ActivationCache, weights: ModelWeights, spec: TargetSpec,
                  mu: PathWeights, initial: np.ndarray | None = None) -> EffectiveTargets:
    """Propagate from the output down to the embeddings.

    ``initial`` overrides the folded-unembedding start target.
    """
    L = weights.config.n_layers
    T, d = cache.seq_len, weights.config.d_model
    resid = np.empty((L + 1, T, d))
    mid = np.empty((L, T, d))
    resid[L] = init_target(spec, weights, cache) if initial is None else initial
    for l in range(L - 1, -1, -1):
        mid[l], resid[l] = propagate_layer(cache, l, mu, resid[l + 1])
    return EffectiveTargets(resid, mid)


# --- scoring -------------------------------------------------------------------


def score_tokens(targets: EffectiveTargets, cache: ActivationCache) -> np.ndarray:
    return np.einsum("td,td->t", cache.resid[0], targets.embedding)


def head_position_scores(targets: EffectiveTargets, cache: ActivationCache) -> np.ndarray:
    config = cache.config
    L, H, dh = config.n_layers, config.n_heads, config.head_dim
    out = np.empty((L, H, cache.seq_len))
    for l in range(L):
        W_O = cache.weights.layers[l].W_O.reshape(H, dh, -1)
        lam = np.einsum("td,hkd->htk", targets.mid[l], W_O)
        out[l] = cache.head_scale[l][:, None] * np.einsum("htk,htk->ht", cache.means[l], lam)
    return out


def neuron_position_scores(targets: EffectiveTargets, cache: ActivationCache) -> np.ndarray:
    L = cache.config.n_layers
    out = np.empty_like(cache.up)
    for l in range(L):
        lam = targets.resid[l + 1] @ cache.weights.layers[l].W_D.T
        out[l] = cache.neuron_scale[l] * cache.gate_act[l] * cache.up[l] * lam
    return out


def score_heads(targets: EffectiveTargets, cache: ActivationCache) -> np.ndarray:
    return head_position_scores(targets, cache).sum(axis=-1)


def score_neurons(targets: EffectiveTargets, cache: ActivationCache) -> np.ndarray:
    return neuron_position_scores(targets, cache).sum(axis=1)


def score_component(targets: EffectiveTargets, cache: ActivationCache, kind: str, layer: int, index: int) -> float:
    """Score of a single component: one cached write dotted with one target."""
    from .model import head_contribution, neuron_contribution

    if kind == "head":
        return float(np.sum(head_contribution(cache, layer, index) * targets.mid[layer]))
    if kind == "neuron":
        return float(np.sum(neuron_contribution(cache, layer, index) * targets.resid[layer + 1]))
    if kind == "token":
        return float(cache.resid[0, index] @ targets.embedding[index])
    raise ValueError(f"unknown component kind {kind!r}")


def attribute(tokens, weights: ModelWeights, spec: TargetSpec, mu: PathWeights | None = None,
              cache: ActivationCache | None = None) -> AttributionScores:
    """Forward (unless a cache is given), propagate, and score everything."""
    mu = mu or sensitivity_config("control-content", 0.5)
    if cache is None:
        cache = forward(tokens, weights).cache
    targets = propagate_all(cache, weights, spec, mu)
    head_pos = head_position_scores(targets, cache)
    neuron_pos = neuron_position_scores(targets, cache)
    return AttributionScores(
        token_scores=score_tokens(targets, cache),
        head_scores=head_pos.sum(axis=-1),
        neuron_scores=neuron_pos.sum(axis=1),
        head_positions=head_pos,
        neuron_positions=neuron_pos,
        mu=mu,
        spec=spec,
    )
