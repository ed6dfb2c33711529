"""SwiGLU decoder-only transformer with RoPE and RMSNorm, in float64 numpy.

Row-vector convention throughout: a residual state ``x`` is a length-``d``
row and projections are applied as ``x @ W``. Head ``h`` owns columns
``h*d_h:(h+1)*d_h`` of ``W_Q``, ``W_K``, ``W_V`` and the same rows of ``W_O``.

:func:`forward` runs the model once and keeps everything attribution needs
in an :class:`ActivationCache`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for inconsistent model configurations or weight shapes."""


def _as_f64(name: str, value, shape: tuple[int, ...] | None = None) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ffn: int
    vocab_size: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    max_seq_len: int = 512

    def __post_init__(self):
        # n_layers == 0 is allowed as a degenerate embed/unembed-only model.
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        for name in ("n_heads", "d_model", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.norm_eps < 0 or self.rope_base <= 0:
            raise ConfigError("norm_eps must be >= 0 and rope_base > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_components(self) -> int:
        return self.n_layers * (self.n_heads + self.d_ffn)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "vocab_size": self.vocab_size,
            "rope_base": self.rope_base,
            "norm_eps": self.norm_eps,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class LayerWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    W_G: np.ndarray
    W_U: np.ndarray
    W_D: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    MATRICES = ("W_Q", "W_K", "W_V", "W_O", "W_G", "W_U", "W_D", "attn_norm", "mlp_norm")


@dataclass(frozen=True)
class ModelWeights:
    """Frozen parameter set. Arrays are copied to read-only float64 on build."""

    config: ModelConfig
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    unembedding: np.ndarray

    @classmethod
    def build(cls, config: ModelConfig, embedding, layers, final_norm, unembedding) -> "ModelWeights":
        d, f, v = config.d_model, config.d_ffn, config.vocab_size
        if len(layers) != config.n_layers:
            raise ConfigError(f"expected {config.n_layers} layers, got {len(layers)}")
        shapes = {
            "W_Q": (d, d), "W_K": (d, d), "W_V": (d, d), "W_O": (d, d),
            "W_G": (d, f), "W_U": (d, f), "W_D": (f, d),
            "attn_norm": (d,), "mlp_norm": (d,),
        }
        built = []
        for l, layer in enumerate(layers):
            get = layer.get if isinstance(layer, dict) else lambda k, _layer=layer: getattr(_layer, k)
            built.append(LayerWeights(**{
                k: _as_f64(f"layers.{l}.{k}", get(k), shape) for k, shape in shapes.items()
            }))
        return cls(
            config=config,
            embedding=_as_f64("embedding", embedding, (v, d)),
            layers=tuple(built),
            final_norm=_as_f64("final_norm", final_norm, (d,)),
            unembedding=_as_f64("unembedding", unembedding, (d, v)),
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        for l, layer in enumerate(self.layers):
            for k in LayerWeights.MATRICES:
                out[f"layers.{l}.{k}"] = getattr(layer, k)
        out["final_norm"] = self.final_norm
        out["unembedding"] = self.unembedding
        return out


# --- primitives -------------------------------------------------------------


def rms_norm(x, gamma, eps: float):
    """Normalize the last axis by its root-mean-square.

    Returns ``(x_tilde, sigma)`` where ``sigma = sqrt(mean(x**2) + eps)`` has
    the leading shape of ``x``. No mean-centering.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = np.sqrt(np.mean(x * x, axis=-1) + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = x / sigma[..., None]
    # zero input with eps == 0: 0/0, define as 0
    scaled = np.where(np.isfinite(scaled), scaled, 0.0)
    return scaled * gamma, sigma


def rope_frequencies(head_dim: int, base: float) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError("rotary embedding needs an even head dimension")
    return base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def rope_rotate(v, positions, base: float = 10000.0, inverse: bool = False) -> np.ndarray:
    """Rotate adjacent pairs ``(v[2j], v[2j+1])`` by ``m * theta_j``.

    ``v`` has shape ``(..., d_h)``; ``positions`` broadcasts against the
    leading axes. ``inverse=True`` rotates by ``-m * theta_j``.
    """
    v = np.asarray(v, dtype=np.float64)
    theta = rope_frequencies(v.shape[-1], base)
    angle = np.asarray(positions, dtype=np.float64)[..., None] * theta
    if inverse:
        angle = -angle
    cos, sin = np.cos(angle), np.sin(angle)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + v.shape[-1:]))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def silu(s):
    return s * logistic(s)


def logistic(s):
    s = np.asarray(s, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _split_heads(M: np.ndarray, n_heads: int) -> np.ndarray:
    """(d, H*d_h) projection -> (H, d, d_h)."""
    d = M.shape[0]
    return M.reshape(d, n_heads, -1).transpose(1, 0, 2)


def _causal_softmax(scores: np.ndarray) -> np.ndarray:
    T = scores.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionOut:
    """Per-head attention results for one layer; arrays carry a leading head axis."""

    output: np.ndarray  # (H, T, d) residual writes
    alpha: np.ndarray  # (H, T, T)
    q_rot: np.ndarray  # (H, T, d_h)
    k_rot: np.ndarray
    values: np.ndarray
    means: np.ndarray


def attention_forward(x_norm, layer: LayerWeights, config: ModelConfig, heads=None) -> AttentionOut:
    """Causal multi-head attention on a normalized input ``(T, d)``.

    ``heads`` selects a subset of head indices (all by default).
    """
    H, dh = config.n_heads, config.head_dim
    T = x_norm.shape[0]
    heads = np.arange(H) if heads is None else np.atleast_1d(heads)
    pos = np.arange(T)
    Wq = _split_heads(layer.W_Q, H)[heads]
    Wk = _split_heads(layer.W_K, H)[heads]
    Wv = _split_heads(layer.W_V, H)[heads]
    Wo = layer.W_O.reshape(H, dh, -1)[heads]
    q_rot = rope_rotate(x_norm @ Wq, pos, config.rope_base)
    k_rot = rope_rotate(x_norm @ Wk, pos, config.rope_base)
    values = x_norm @ Wv
    scores = q_rot @ k_rot.transpose(0, 2, 1) / math.sqrt(dh)
    alpha = _causal_softmax(scores)
    means = alpha @ values
    return AttentionOut(means @ Wo, alpha, q_rot, k_rot, values, means)


@dataclass
class GLUOut:
    output: np.ndarray  # (T, d)
    pre: np.ndarray  # (T, F) gate pre-activations s
    gate: np.ndarray  # (T, F) SiLU(s)
    up: np.ndarray  # (T, F) up values v


def glu_forward(x_norm, layer: LayerWeights, neuron_scale=None) -> GLUOut:
    pre = x_norm @ layer.W_G
    gate = silu(pre)
    up = x_norm @ layer.W_U
    act = gate * up
    if neuron_scale is not None:
        act = act * neuron_scale
    return GLUOut(act @ layer.W_D, pre, gate, up)


# --- full forward -------------------------------------------------------------


@dataclass
class Intervention:
    """Multiplicative scaling of component writes during a forward pass.

    ``head_scale[l, h]`` and ``neuron_scale[l, n]`` multiply the residual
    contribution of that component; 0 is zero-ablation. ``token_scale[i]``
    multiplies the embedding row at position ``i``.
    """

    head_scale: np.ndarray | None = None
    neuron_scale: np.ndarray | None = None
    token_scale: np.ndarray | None = None

    @classmethod
    def ablate(cls, config: ModelConfig, heads=(), neurons=(), tokens=(), T: int | None = None):
        hs = np.ones((config.n_layers, config.n_heads))
        ns = np.ones((config.n_layers, config.d_ffn))
        for l, h in heads:
            hs[l, h] = 0.0
        for l, n in neurons:
            ns[l, n] = 0.0
        ts = None
        if len(tokens):
            if T is None:
                raise ValueError("T required for token ablation")
            ts = np.ones(T)
            ts[list(tokens)] = 0.0
        return cls(hs, ns, ts)


@dataclass
class ActivationCache:
    """Everything a single forward pass retains for attribution.

    Shapes (L layers, H heads, T positions, F = d_ffn):
    ``resid`` (L+1, T, d) holds X^(0..L); ``resid_mid`` (L, T, d);
    ``x_attn``/``x_mlp`` (L, T, d) normalized inputs with ``sigma_attn``/
    ``sigma_mlp`` (L, T); ``alpha`` (L, H, T, T); ``q_rot``, ``k_rot``,
    ``values``, ``means`` (L, H, T, d_h); ``gate_pre``, ``gate_act``, ``up``
    (L, T, F); ``sigma_final`` (T,).
    """

    weights: ModelWeights
    tokens: np.ndarray
    resid: np.ndarray
    resid_mid: np.ndarray
    x_attn: np.ndarray
    sigma_attn: np.ndarray
    x_mlp: np.ndarray
    sigma_mlp: np.ndarray
    alpha: np.ndarray
    q_rot: np.ndarray
    k_rot: np.ndarray
    values: np.ndarray
    means: np.ndarray
    gate_pre: np.ndarray
    gate_act: np.ndarray
    up: np.ndarray
    sigma_final: np.ndarray
    head_scale: np.ndarray
    neuron_scale: np.ndarray

    @property
    def config(self) -> ModelConfig:
        return self.weights.config

    @property
    def seq_len(self) -> int:
        return self.resid.shape[1]


@dataclass
class ForwardOutput:
    logits: np.ndarray
    cache: ActivationCache = field(repr=False)


def embed(tokens, weights: ModelWeights) -> np.ndarray:
    config = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D list")
    if tokens.size > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.size} exceeds max_seq_len {config.max_seq_len}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    return weights.embedding[tokens]


def forward(tokens, weights: ModelWeights, intervention: Intervention | None = None,
            x0: np.ndarray | None = None) -> ForwardOutput:
    """Run the model and cache every activation attribution needs.

    ``x0`` overrides the embedding lookup (used for finite-difference
    gradients w.r.t. the embedding rows).
    """
    config = weights.config
    L, H, dh, F = config.n_layers, config.n_heads, config.head_dim, config.d_ffn
    tokens = np.asarray(tokens)
    x = embed(tokens, weights).copy() if x0 is None else np.array(x0, dtype=np.float64)
    T, d = x.shape
    iv = intervention or Intervention()
    head_scale = np.ones((L, H)) if iv.head_scale is None else np.asarray(iv.head_scale, dtype=np.float64)
    neuron_scale = np.ones((L, F)) if iv.neuron_scale is None else np.asarray(iv.neuron_scale, dtype=np.float64)
    if iv.token_scale is not None:
        x = x * np.asarray(iv.token_scale, dtype=np.float64)[:, None]

    resid = np.empty((L + 1, T, d))
    resid_mid = np.empty((L, T, d))
    x_attn = np.empty((L, T, d))
    x_mlp = np.empty((L, T, d))
    sigma_attn = np.empty((L, T))
    sigma_mlp = np.empty((L, T))
    alpha = np.empty((L, H, T, T))
    q_rot = np.empty((L, H, T, dh))
    k_rot = np.empty((L, H, T, dh))
    values = np.empty((L, H, T, dh))
    means = np.empty((L, H, T, dh))
    gate_pre = np.empty((L, T, F))
    gate_act = np.empty((L, T, F))
    up = np.empty((L, T, F))

    resid[0] = x
    for l, layer in enumerate(weights.layers):
        x_attn[l], sigma_attn[l] = rms_norm(x, layer.attn_norm, config.norm_eps)
        att = attention_forward(x_attn[l], layer, config)
        alpha[l], q_rot[l], k_rot[l], values[l], means[l] = (
            att.alpha, att.q_rot, att.k_rot, att.values, att.means)
        x = x + np.einsum("h,htd->td", head_scale[l], att.output)
        resid_mid[l] = x

        x_mlp[l], sigma_mlp[l] = rms_norm(x, layer.mlp_norm, config.norm_eps)
        glu = glu_forward(x_mlp[l], layer, neuron_scale[l])
        gate_pre[l], gate_act[l], up[l] = glu.pre, glu.gate, glu.up
        x = x + glu.output
        resid[l + 1] = x

    x_final, sigma_final = rms_norm(x, weights.final_norm, config.norm_eps)
    logits = x_final @ weights.unembedding
    cache = ActivationCache(
        weights=weights, tokens=tokens, resid=resid, resid_mid=resid_mid,
        x_attn=x_attn, sigma_attn=sigma_attn, x_mlp=x_mlp, sigma_mlp=sigma_mlp,
        alpha=alpha, q_rot=q_rot, k_rot=k_rot, values=values, means=means,
        gate_pre=gate_pre, gate_act=gate_act, up=up, sigma_final=sigma_final,
        head_scale=head_scale, neuron_scale=neuron_scale,
    )
    return ForwardOutput(logits, cache)


# --- component decomposition -------------------------------------------------


def _check_layer(cache: ActivationCache, l: int) -> None:
    if not 0 <= l < cache.config.n_layers:
        raise IndexError(f"layer {l} out of range")


def head_contribution(cache: ActivationCache, l: int, h: int) -> np.ndarray:
    """Residual-stream write ``(T, d)`` of head ``h`` in layer ``l``."""
    _check_layer(cache, l)
    config = cache.config
    if not 0 <= h < config.n_heads:
        raise IndexError(f"head {h} out of range")
    dh = config.head_dim
    W_O = cache.weights.layers[l].W_O[h * dh:(h + 1) * dh]
    return cache.head_scale[l, h] * (cache.means[l, h] @ W_O)


def neuron_contribution(cache: ActivationCache, l: int, n: int) -> np.ndarray:
    """Residual-stream write ``(T, d)`` of GLU neuron ``n`` in layer ``l``."""
    _check_layer(cache, l)
    if not 0 <= n < cache.config.d_ffn:
        raise IndexError(f"neuron {n} out of range")
    act = cache.neuron_scale[l, n] * cache.gate_act[l, :, n] * cache.up[l, :, n]
    return np.outer(act, cache.weights.layers[l].W_D[n])


def head_outputs(cache: ActivationCache, l: int) -> np.ndarray:
    """All head writes of layer ``l`` stacked as ``(H, T, d)``."""
    config = cache.config
    W_O = cache.weights.layers[l].W_O.reshape(config.n_heads, config.head_dim, -1)
    return cache.head_scale[l][:, None, None] * (cache.means[l] @ W_O)


def neuron_activations(cache: ActivationCache) -> np.ndarray:
    """Scalar neuron activations ``gate * up`` (L, T, F), including interventions."""
    return cache.neuron_scale[:, None, :] * cache.gate_act * cache.up
