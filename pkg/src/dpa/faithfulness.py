"""Disruption and recovery curves over ranked tokens or components."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Intervention, ModelWeights, forward

log = logging.getLogger(__name__)

DEFAULT_K_GRID = (0.001, 0.005, 0.01, 0.05, 0.1, 0.2, 0.5)


class UndefinedInstanceError(ValueError):
    """The clean target probability is zero, so the ratio is undefined."""


@dataclass(frozen=True)
class AblationSpec:
    granularity: str = "component"  # token | component
    mode: str = "disruption"  # disruption | recovery
    token_mode: str = "zero-embed"  # zero-embed | remove
    k_grid: tuple[float, ...] = DEFAULT_K_GRID

    def __post_init__(self):
        if self.granularity not in ("token", "component"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.mode not in ("disruption", "recovery"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.token_mode not in ("zero-embed", "remove"):
            raise ValueError(f"unknown token_mode {self.token_mode!r}")
        k = np.asarray(self.k_grid, dtype=np.float64)
        if k.size == 0 or np.any(np.diff(k) <= 0) or k.min() < 0 or k.max() > 1:
            raise ValueError("k_grid must be strictly increasing within [0, 1]")


@dataclass
class FaithfulnessCurve:
    points: list[tuple[float, float]] = field(default_factory=list)

    @property
    def ks(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def auc(self) -> float:
        return auc(self)

    def to_dict(self) -> dict:
        return {"k": self.ks.tolist(), "ratio": self.ratios.tolist(), "auc": self.auc}


def retained_ratio(p_clean: float, p_ablated: float) -> float:
    """Share of the clean target probability that survives ablation."""
    if not p_clean > 0:
        raise UndefinedInstanceError(f"clean probability {p_clean} is not positive")
    return p_ablated / p_clean


def auc(curve: FaithfulnessCurve) -> float:
    """Trapezoidal area under the curve, normalized by the k span."""
    k, r = curve.ks, curve.ratios
    if k.size == 0:
        raise ValueError("empty curve")
    if k.size == 1:
        return float(r[0])
    area = float(np.sum((k[1:] - k[:-1]) * (r[1:] + r[:-1]) / 2.0))
    return area / float(k[-1] - k[0])


def target_probability(logits: np.ndarray, spec) -> float:
    row = logits[spec.position]
    z = np.exp(row - row.max())
    return float(z[spec.token] / z.sum())


def ranked_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep the flat (layer, index) order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty ranking")
    return np.argsort(-scores, kind="stable")


def ablation_count(k: float, n: int) -> int:
    return min(n, math.ceil(k * n - 1e-9))


def selected_set(order: np.ndarray, k: float, mode: str) -> np.ndarray:
    """Indices to ablate at fraction ``k``; recovery ablates the complement of the top-k."""
    top = ablation_count(k, order.size)
    return order[:top] if mode == "disruption" else order[top:]


def _component_intervention(config, flat: np.ndarray) -> Intervention:
    L, H, F = config.n_layers, config.n_heads, config.d_ffn
    mask = np.ones(L * (H + F))
    mask[flat] = 0.0
    mask = mask.reshape(L, H + F)
    return Intervention(mask[:, :H].copy(), mask[:, H:].copy())


def ablated_probability(weights: ModelWeights, tokens, spec, ablate: np.ndarray, abl: AblationSpec) -> float:
    config = weights.config
    if abl.granularity == "component":
        iv = _component_intervention(config, ablate)
        return target_probability(forward(tokens, weights, iv).logits, spec)
    if abl.token_mode == "zero-embed":
        scale = np.ones(len(tokens))
        scale[ablate] = 0.0
        return target_probability(forward(tokens, weights, Intervention(token_scale=scale)).logits, spec)
    # removal keeps the attribution position so the prediction site exists
    drop = set(int(i) for i in ablate) - {spec.position}
    kept = [i for i in range(len(tokens)) if i not in drop]
    new_pos = kept.index(spec.position)
    new_tokens = [tokens[i] for i in kept]
    logits = forward(new_tokens, weights).logits
    return target_probability(logits, type(spec)(spec.token, new_pos))


def run_curve(weights: ModelWeights, tokens, spec, ranking, abl: AblationSpec,
              p_clean: float | None = None) -> FaithfulnessCurve:
    """Ablate (disruption) or keep (recovery) the top-k fraction of ``ranking`` at each k."""
    n_expected = len(tokens) if abl.granularity == "token" else weights.config.n_components
    ranking = np.asarray(ranking, dtype=np.float64)
    if ranking.size == 0:
        raise ValueError("empty ranking")
    if ranking.size != n_expected:
        raise ValueError(f"ranking has {ranking.size} entries, expected {n_expected}")
    if p_clean is None:
        p_clean = target_probability(forward(tokens, weights).logits, spec)
    order = ranked_order(ranking)
    curve = FaithfulnessCurve()
    for k in abl.k_grid:
        ablate = selected_set(order, k, abl.mode)
        p = p_clean if ablate.size == 0 else ablated_probability(weights, tokens, spec, ablate, abl)
        curve.points.append((float(k), retained_ratio(p_clean, p)))
    return curve


def mean_curve(curves: list[FaithfulnessCurve]) -> FaithfulnessCurve:
    if not curves:
        raise ValueError("no curves to average")
    ks = curves[0].ks
    ratios = np.mean([c.ratios for c in curves], axis=0)
    return FaithfulnessCurve(list(zip(ks.tolist(), ratios.tolist())))


def summarize(disruption: FaithfulnessCurve, recovery: FaithfulnessCurve) -> dict:
    """AUCs on the 0-100 scale; ``total = rec - dis``."""
    dis = 100.0 * disruption.auc
    rec = 100.0 * recovery.auc
    return {"dis": dis, "rec": rec, "total": rec - dis}
