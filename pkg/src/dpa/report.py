"""JSON report documents (schema ``dpa-report/1``) and the static HTML view."""

from __future__ import annotations

import html
import json
import math

import numpy as np

from .engine import AttributionScores
from .model import ModelConfig

SCHEMA = "dpa-report/1"


def _finite(values) -> list:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("report scores must be finite")
    return arr.tolist()


def model_description(config: ModelConfig, path: str | None = None, kind: str | None = None) -> dict:
    out = {"config": config.to_dict(), "n_components": config.n_components}
    if path is not None:
        out["path"] = str(path)
    if kind is not None:
        out["kind"] = kind
    return out


def _top(matrix: np.ndarray, n: int, key: str) -> list[dict]:
    flat = matrix.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")[:n]
    cols = matrix.shape[1]
    return [{"layer": int(i // cols), key: int(i % cols), "score": float(flat[i])} for i in order]


def attribution_report(scores: AttributionScores, model: dict, tokens, top_n: int = 10,
                       full: bool = False, granularity: str = "all") -> dict:
    doc = {
        "schema": SCHEMA,
        "kind": "attribution",
        "model": model,
        "tokens": [int(t) for t in tokens],
        "target": {"token": scores.spec.token, "position": scores.spec.position},
        "path_weights": scores.mu.to_dict(),
        "granularity": granularity,
    }
    if granularity in ("all", "token"):
        doc["token_scores"] = _finite(scores.token_scores)
    if granularity in ("all", "component"):
        doc["top_heads"] = _top(scores.head_scores, top_n, "head")
        doc["top_neurons"] = _top(scores.neuron_scores, top_n, "neuron")
        if full:
            doc["head_scores"] = _finite(scores.head_scores)
            doc["neuron_scores"] = _finite(scores.neuron_scores)
            doc["head_scores_per_position"] = _finite(scores.head_positions)
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, allow_nan=False)


def _cell_color(score: float, scale: float) -> str:
    a = 0.0 if scale == 0 else min(1.0, abs(score) / scale)
    rgb = "192,57,43" if score >= 0 else "44,111,187"
    return f"rgba({rgb},{a:.3f})"


def attribution_html(doc: dict, token_labels=None) -> str:
    """Self-contained page: token heatmap plus top-component tables."""
    tokens = doc["tokens"]
    labels = token_labels or [str(t) for t in tokens]
    target = doc["target"]
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'><title>DPA attribution</title>",
        "<style>body{font-family:sans-serif;margin:2em;color:#222}"
        ".tok{display:inline-block;padding:4px 7px;margin:2px;border-radius:3px;border:1px solid #ddd;"
        "font-family:monospace}.tgt{outline:2px solid #222}"
        "table{border-collapse:collapse;margin:1em 0}td,th{border:1px solid #ccc;padding:3px 8px;"
        "text-align:right}</style></head><body>",
        f"<h1>Attribution of token {target['token']} at position {target['position']}</h1>",
        "<p>Path weights: " + html.escape(", ".join(f"{k}={v:g}" for k, v in doc["path_weights"].items()))
        + "</p>",
    ]
    if "token_scores" in doc:
        scores = doc["token_scores"]
        scale = max((abs(s) for s in scores), default=0.0)
        parts.append("<h2>Tokens</h2><p>red: raises the target logit, blue: lowers it</p><div>")
        for i, (lab, s) in enumerate(zip(labels, scores)):
            cls = "tok tgt" if i == target["position"] else "tok"
            parts.append(f"<span class='{cls}' style='background:{_cell_color(s, scale)}' "
                         f"title='{s:.6g}'>{html.escape(lab)}</span>")
        parts.append("</div>")
    for key, name in (("top_heads", "head"), ("top_neurons", "neuron")):
        if key in doc:
            parts.append(f"<h2>Top {name}s</h2><table><tr><th>layer</th><th>{name}</th><th>score</th></tr>")
            for row in doc[key]:
                parts.append(f"<tr><td>{row['layer']}</td><td>{row[name]}</td>"
                             f"<td>{row['score']:.6g}</td></tr>")
            parts.append("</table>")
    parts.append("</body></html>")
    return "\n".join(parts)


def bench_report(result: dict, model: dict, tokens) -> dict:
    return {"schema": SCHEMA, "kind": "benchmark", "model": model,
            "seq_len": len(tokens), "benchmark": result}


def evaluation_report(results: list[dict], model: dict, k_grid) -> dict:
    for r in results:
        for v in r["summary"].values():
            if not math.isfinite(v):
                raise ValueError("non-finite AUC")
    return {"schema": SCHEMA, "kind": "evaluation", "model": model, "k_grid": list(k_grid),
            "faithfulness": results}
