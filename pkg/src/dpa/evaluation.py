"""Run any attribution method over an instance suite and collect curves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .engine import PathWeights, TargetSpec, attribute, sensitivity_config
from .faithfulness import (
    DEFAULT_K_GRID,
    AblationSpec,
    FaithfulnessCurve,
    UndefinedInstanceError,
    mean_curve,
    run_curve,
    summarize,
    target_probability,
)
from .model import ModelWeights, forward

log = logging.getLogger(__name__)

TOKEN_METHODS = ("dpa", "random", "activation-patching", "input-x-gradient", "attn-last", "attn-mean", "rollout")
COMPONENT_METHODS = ("dpa", "random", "activation-patching", "atp", "attn-only", "mlp-only", "norm-only")


def method_scores(method: str, weights: ModelWeights, tokens, spec: TargetSpec, granularity: str,
                  seed: int = 0, mu: PathWeights | None = None) -> np.ndarray:
    """Flat scores for ranking: length T for tokens, L*(H+F) layer-major for components."""
    config = weights.config
    allowed = TOKEN_METHODS if granularity == "token" else COMPONENT_METHODS
    if method not in allowed:
        raise ValueError(f"method {method!r} not available at {granularity} granularity; choose from {allowed}")
    T = len(tokens)
    n = T if granularity == "token" else config.n_components
    if method == "random":
        return baselines.random_scores(n, seed)
    if method == "dpa":
        s = attribute(tokens, weights, spec, mu or sensitivity_config("control-content", 0.5))
        return s.token_scores if granularity == "token" else s.component_scores()
    if method == "activation-patching":
        if granularity == "token":
            return baselines.token_patching_scores(weights, tokens, spec)
        return baselines.flatten_components(*baselines.patching_scores(weights, tokens, spec))
    if method == "atp":
        return baselines.flatten_components(*baselines.atp_scores(weights, tokens, spec))
    if method == "input-x-gradient":
        return baselines.input_x_gradient(weights, tokens, spec)
    cache = forward(tokens, weights).cache
    if method in ("attn-last", "attn-mean"):
        return baselines.attention_scores(cache, spec.position, method.split("-")[1])
    if method == "rollout":
        return baselines.rollout(cache, spec.position)
    heads, neurons = baselines.magnitude_scores(cache, method)
    # unscored component kinds rank last
    if heads is None:
        heads = np.full((config.n_layers, config.n_heads), -np.inf)
    if neurons is None:
        neurons = np.full((config.n_layers, config.d_ffn), -np.inf)
    return baselines.flatten_components(heads, neurons)


@dataclass
class InstanceResult:
    index: int
    spec: TargetSpec
    p_clean: float
    disruption: FaithfulnessCurve
    recovery: FaithfulnessCurve


@dataclass
class EvaluationResult:
    method: str
    granularity: str
    instances: list[InstanceResult] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def disruption(self) -> FaithfulnessCurve:
        return mean_curve([r.disruption for r in self.instances])

    @property
    def recovery(self) -> FaithfulnessCurve:
        return mean_curve([r.recovery for r in self.instances])

    def summary(self) -> dict:
        return summarize(self.disruption, self.recovery)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "granularity": self.granularity,
            "n_instances": len(self.instances),
            "skipped": self.skipped,
            "summary": self.summary(),
            "mean_curves": {"disruption": self.disruption.to_dict(), "recovery": self.recovery.to_dict()},
            "instances": [
                {
                    "index": r.index,
                    "target": r.spec.token,
                    "position": r.spec.position,
                    "p_clean": r.p_clean,
                    "disruption": r.disruption.to_dict(),
                    "recovery": r.recovery.to_dict(),
                }
                for r in self.instances
            ],
        }


def evaluate(weights: ModelWeights, instances, method: str, granularity: str = "component",
             k_grid=DEFAULT_K_GRID, seed: int = 0, token_mode: str = "zero-embed",
             mu: PathWeights | None = None) -> EvaluationResult:
    """Disruption and recovery curves for each instance ``{"tokens", "target", "position"}``.

    The random method draws a fresh ranking per instance from ``seed + index``.
    """
    result = EvaluationResult(method, granularity)
    dis_spec = AblationSpec(granularity, "disruption", token_mode, tuple(k_grid))
    rec_spec = AblationSpec(granularity, "recovery", token_mode, tuple(k_grid))
    for idx, inst in enumerate(instances):
        tokens = list(inst["tokens"])
        spec = TargetSpec(int(inst["target"]), int(inst["position"]))
        spec.validate(weights.config.vocab_size, len(tokens))
        p_clean = target_probability(forward(tokens, weights).logits, spec)
        if not p_clean > 0:
            log.warning("instance %d: clean probability is zero, skipped", idx)
            result.skipped.append(idx)
            continue
        scores = method_scores(method, weights, tokens, spec, granularity, seed + idx, mu)
        try:
            dis = run_curve(weights, tokens, spec, scores, dis_spec, p_clean)
            rec = run_curve(weights, tokens, spec, scores, rec_spec, p_clean)
        except UndefinedInstanceError:
            log.warning("instance %d: undefined ratio, skipped", idx)
            result.skipped.append(idx)
            continue
        result.instances.append(InstanceResult(idx, spec, p_clean, dis, rec))
    if not result.instances:
        raise ValueError("no evaluable instances")
    return result
