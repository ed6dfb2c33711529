"""Wall-clock scaling of DPA versus activation patching in the number of components."""

from __future__ import annotations

import statistics
import time
from collections import defaultdict

import numpy as np

from .baselines import ComponentRef, all_components, scaled_intervention, target_logit
from .engine import EffectiveTargets, TargetSpec, propagate_all, sensitivity_config
from .model import ActivationCache, ModelWeights, forward


def score_components(targets: EffectiveTargets, cache: ActivationCache, refs) -> np.ndarray:
    """Scores for an arbitrary component subset, one dot product per component."""
    config = cache.config
    dh = config.head_dim
    by_site = defaultdict(list)
    for pos, ref in enumerate(refs):
        by_site[(ref.kind, ref.layer)].append((pos, ref.index))
    out = np.empty(len(refs))
    for (kind, l), items in by_site.items():
        where = [p for p, _ in items]
        idx = np.array([i for _, i in items])
        layer = cache.weights.layers[l]
        if kind == "head":
            W_O = layer.W_O.reshape(config.n_heads, dh, -1)[idx]  # (m, dh, d)
            writes = cache.means[l, idx] @ W_O  # (m, T, d)
            out[where] = cache.head_scale[l, idx] * np.einsum("mtd,td->m", writes, targets.mid[l])
        else:
            lam = targets.resid[l + 1] @ layer.W_D[idx].T  # (T, m)
            act = cache.gate_act[l][:, idx] * cache.up[l][:, idx] * cache.neuron_scale[l, idx]
            out[where] = np.sum(act * lam, axis=0)
    return out


def dpa_run(tokens, weights: ModelWeights, spec: TargetSpec, refs) -> np.ndarray:
    """Full DPA pipeline for ``refs``: one forward, one propagation, M dot products."""
    cache = forward(tokens, weights).cache
    targets = propagate_all(cache, weights, spec, sensitivity_config("control-content", 0.5))
    return score_components(targets, cache, refs)


def ap_run(tokens, weights: ModelWeights, spec: TargetSpec, refs) -> np.ndarray:
    """Activation patching for ``refs``: one clean forward plus one per component."""
    clean = target_logit(tokens, weights, spec)
    T = len(tokens)
    return np.array([clean - target_logit(tokens, weights, spec, scaled_intervention(weights.config, T, r, 0.0))
                     for r in refs])


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _pick(components: list[ComponentRef], m: int, seed: int) -> list[ComponentRef]:
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(components), size=m, replace=False))
    return [components[i] for i in idx]


def run_benchmark(weights: ModelWeights, tokens, spec: TargetSpec, counts, repeats: int = 5,
                  seed: int = 0, methods=("dpa", "activation-patching")) -> dict:
    """Median timings per component count. ``counts`` may contain ``"all"``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    comps = all_components(weights.config)
    ms = sorted({len(comps) if c == "all" else int(c) for c in counts})
    if not ms or ms[0] < 1 or ms[-1] > len(comps):
        raise ValueError(f"component counts must lie in [1, {len(comps)}]")
    # warm-up so first-call overheads do not land in the first row
    forward(tokens, weights)
    forward_time = _median_time(lambda: forward(tokens, weights), repeats)
    rows = []
    for m in ms:
        refs = _pick(comps, m, seed)
        row = {"m": m}
        if "dpa" in methods:
            row["dpa_seconds"] = _median_time(lambda: dpa_run(tokens, weights, spec, refs), repeats)
        if "activation-patching" in methods:
            row["ap_seconds"] = _median_time(lambda: ap_run(tokens, weights, spec, refs), repeats)
        rows.append(row)
    result = {"forward_seconds": forward_time, "n_components": len(comps), "repeats": repeats, "rows": rows}
    first, last = rows[0], rows[-1]
    if "dpa" in methods:
        result["dpa_ratio"] = last["dpa_seconds"] / first["dpa_seconds"]
    if "activation-patching" in methods and len(rows) > 1:
        m = np.array([r["m"] for r in rows], dtype=np.float64)
        t = np.array([r["ap_seconds"] for r in rows]) / forward_time
        result["ap_forwards_per_component"] = float(np.polyfit(m, t, 1)[0])
        result["ap_ratio"] = last["ap_seconds"] / first["ap_seconds"]
    return result
