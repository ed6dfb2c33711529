"""Reference attribution methods.

Activation patching (zero-ablation of one component's residual write) is
the ground-truth oracle. Gradients are central finite differences over
forward passes, which is affordable only for desk-scale models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ActivationCache, Intervention, ModelConfig, ModelWeights, forward, head_outputs, neuron_activations

FD_STEP = 1e-4

METHODS = (
    "activation-patching", "input-x-gradient", "attn-last", "attn-mean", "rollout",
    "attn-only", "mlp-only", "norm-only", "atp", "random",
)


@dataclass(frozen=True)
class ComponentRef:
    kind: str  # "head" | "neuron" | "token"
    layer: int
    index: int

    def __post_init__(self):
        if self.kind not in ("head", "neuron", "token"):
            raise ValueError(f"unknown component kind {self.kind!r}")

    def validate(self, config: ModelConfig, seq_len: int | None = None) -> None:
        if self.kind == "token":
            if seq_len is not None and not 0 <= self.index < seq_len:
                raise ValueError(f"token position {self.index} out of range")
            return
        if not 0 <= self.layer < config.n_layers:
            raise ValueError(f"layer {self.layer} out of range")
        limit = config.n_heads if self.kind == "head" else config.d_ffn
        if not 0 <= self.index < limit:
            raise ValueError(f"{self.kind} index {self.index} out of range")

    def __str__(self) -> str:
        if self.kind == "token":
            return f"token[{self.index}]"
        return f"L{self.layer}.{'H' if self.kind == 'head' else 'N'}{self.index}"


def all_components(config: ModelConfig) -> list[ComponentRef]:
    """Layer-major order matching ``AttributionScores.component_scores``."""
    out = []
    for l in range(config.n_layers):
        out += [ComponentRef("head", l, h) for h in range(config.n_heads)]
        out += [ComponentRef("neuron", l, n) for n in range(config.d_ffn)]
    return out


def flatten_components(head_scores, neuron_scores) -> np.ndarray:
    return np.concatenate([head_scores, neuron_scores], axis=1).ravel()


def target_logit(tokens, weights: ModelWeights, spec, intervention: Intervention | None = None,
                 x0: np.ndarray | None = None) -> float:
    return float(forward(tokens, weights, intervention, x0=x0).logits[spec.position, spec.token])


def scaled_intervention(config: ModelConfig, T: int, ref: ComponentRef, scale: float) -> Intervention:
    iv = Intervention(np.ones((config.n_layers, config.n_heads)), np.ones((config.n_layers, config.d_ffn)))
    if ref.kind == "head":
        iv.head_scale[ref.layer, ref.index] = scale
    elif ref.kind == "neuron":
        iv.neuron_scale[ref.layer, ref.index] = scale
    else:
        iv.token_scale = np.ones(T)
        iv.token_scale[ref.index] = scale
    return iv


def activation_patch(weights: ModelWeights, tokens, component: ComponentRef, spec,
                     clean_logit: float | None = None) -> float:
    """Clean target logit minus the logit with ``component`` zero-ablated."""
    T = len(tokens)
    component.validate(weights.config, T)
    spec.validate(weights.config.vocab_size, T)
    if clean_logit is None:
        clean_logit = target_logit(tokens, weights, spec)
    return clean_logit - target_logit(tokens, weights, spec, scaled_intervention(weights.config, T, component, 0.0))


def patching_scores(weights: ModelWeights, tokens, spec):
    """Activation-patching deltas for every head and neuron: ``(heads, neurons)``."""
    config = weights.config
    clean = target_logit(tokens, weights, spec)
    heads = np.zeros((config.n_layers, config.n_heads))
    neurons = np.zeros((config.n_layers, config.d_ffn))
    for ref in all_components(config):
        val = activation_patch(weights, tokens, ref, spec, clean)
        (heads if ref.kind == "head" else neurons)[ref.layer, ref.index] = val
    return heads, neurons


def token_patching_scores(weights: ModelWeights, tokens, spec) -> np.ndarray:
    clean = target_logit(tokens, weights, spec)
    return np.array([activation_patch(weights, tokens, ComponentRef("token", 0, i), spec, clean)
                     for i in range(len(tokens))])


def logit_gradient(weights: ModelWeights, tokens, spec, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the target logit w.r.t. the embedding rows, ``(T, d)``."""
    x0 = weights.embedding[np.asarray(tokens)]
    grad = np.zeros_like(x0)
    for i in range(x0.shape[0]):
        for c in range(x0.shape[1]):
            plus, minus = x0.copy(), x0.copy()
            plus[i, c] += step
            minus[i, c] -= step
            grad[i, c] = (target_logit(tokens, weights, spec, x0=plus)
                          - target_logit(tokens, weights, spec, x0=minus)) / (2 * step)
    return grad


def input_x_gradient(weights: ModelWeights, tokens, spec, step: float = FD_STEP) -> np.ndarray:
    x0 = weights.embedding[np.asarray(tokens)]
    return np.einsum("td,td->t", x0, logit_gradient(weights, tokens, spec, step))


def attention_scores(cache: ActivationCache, position: int, variant: str = "last") -> np.ndarray:
    """Head-averaged attention from ``position``: last layer, or averaged over layers."""
    if cache.config.n_layers == 0:
        raise ValueError("attention baselines need at least one layer")
    if variant == "last":
        return cache.alpha[-1, :, position].mean(axis=0)
    if variant == "mean":
        return cache.alpha[:, :, position].mean(axis=(0, 1))
    raise ValueError(f"unknown attention variant {variant!r}")


def rollout(cache: ActivationCache, position: int, residual_weight: float = 0.5) -> np.ndarray:
    """Attention rollout: product of ``(w I + (1-w) mean_h alpha)`` from top to bottom."""
    T = cache.seq_len
    flow = np.eye(T)
    for l in range(cache.config.n_layers):
        mixed = residual_weight * np.eye(T) + (1 - residual_weight) * cache.alpha[l].mean(axis=0)
        mixed /= mixed.sum(axis=-1, keepdims=True)
        flow = mixed @ flow
    return flow[position]


def magnitude_scores(cache: ActivationCache, variant: str):
    """Activation-magnitude component scores as ``(heads | None, neurons | None)``.

    ``attn-only`` scores heads by the mean absolute entry of their write,
    ``mlp-only`` scores neurons by mean ``|gate * up|``, and ``norm-only``
    scores both by the per-position L2 norm of the write, summed.
    """
    config = cache.config
    acts = neuron_activations(cache)  # (L, T, F)
    if variant == "attn-only":
        heads = np.stack([np.abs(head_outputs(cache, l)).mean(axis=(1, 2)) for l in range(config.n_layers)])
        return heads, None
    if variant == "mlp-only":
        return None, np.abs(acts).mean(axis=1)
    if variant == "norm-only":
        heads = np.stack([np.linalg.norm(head_outputs(cache, l), axis=-1).sum(axis=-1)
                          for l in range(config.n_layers)])
        row_norms = np.stack([np.linalg.norm(w.W_D, axis=1) for w in cache.weights.layers])  # (L, F)
        neurons = np.abs(acts).sum(axis=1) * row_norms
        return heads, neurons
    raise ValueError(f"unknown magnitude variant {variant!r}")


def atp_scores(weights: ModelWeights, tokens, spec, step: float = FD_STEP):
    """Attribution patching: contribution times logit gradient at its write site.

    The directional derivative along the contribution is taken by scaling
    the component by ``1 +/- step``, which shifts its site by exactly
    ``+/- step * contribution``.
    """
    config = weights.config
    T = len(tokens)
    heads = np.zeros((config.n_layers, config.n_heads))
    neurons = np.zeros((config.n_layers, config.d_ffn))
    for ref in all_components(config):
        up = target_logit(tokens, weights, spec, scaled_intervention(config, T, ref, 1 + step))
        down = target_logit(tokens, weights, spec, scaled_intervention(config, T, ref, 1 - step))
        (heads if ref.kind == "head" else neurons)[ref.layer, ref.index] = (up - down) / (2 * step)
    return heads, neurons


def random_scores(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)
