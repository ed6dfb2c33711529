"""Static figures written next to the JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

POS_COLOR = "#c0392b"
NEG_COLOR = "#2c6fbb"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def token_bars(tokens, scores, path, labels=None, position=None) -> Path:
    """Signed per-token scores, red for positive and blue for negative."""
    scores = np.asarray(scores)
    fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(scores) + 2), 3))
    colors = [POS_COLOR if s >= 0 else NEG_COLOR for s in scores]
    ax.bar(np.arange(len(scores)), scores, color=colors)
    ax.axhline(0, color="k", lw=0.6)
    names = labels or [str(t) for t in tokens]
    ax.set_xticks(np.arange(len(scores)), names, rotation=90 if len(scores) > 16 else 0)
    if position is not None:
        ax.get_xticklabels()[position].set_fontweight("bold")
    ax.set_xlabel("token")
    ax.set_ylabel("attribution")
    return _save(fig, path)


def component_heatmap(matrix, path, xlabel="head", title=None) -> Path:
    matrix = np.asarray(matrix)
    lim = float(np.max(np.abs(matrix))) or 1.0
    fig, ax = plt.subplots(figsize=(max(3, 0.1 * matrix.shape[1] + 3), 0.5 * matrix.shape[0] + 1.5))
    im = ax.imshow(matrix, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto", interpolation="nearest")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("layer")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def faithfulness_curves(curves: dict, path, title=None) -> Path:
    """``curves`` maps a label to ``{"k": [...], "ratio": [...]}``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, c in curves.items():
        ax.plot(c["k"], c["ratio"], marker="o", ms=3, label=label)
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlabel("fraction ablated / kept (k)")
    ax.set_ylabel("retained probability ratio")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def bench_timings(result: dict, path) -> Path:
    rows = result["rows"]
    m = [r["m"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if "dpa_seconds" in rows[0]:
        ax.plot(m, [r["dpa_seconds"] for r in rows], marker="o", label="DPA")
    if "ap_seconds" in rows[0]:
        ax.plot(m, [r["ap_seconds"] for r in rows], marker="s", label="activation patching")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("components attributed (M)")
    ax.set_ylabel("median seconds")
    ax.legend(fontsize=8)
    return _save(fig, path)
