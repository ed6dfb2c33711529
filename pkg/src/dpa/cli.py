"""Command-line entry point: ``dpa make-model | attribute | evaluate | bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report, zoo
from .bench import run_benchmark
from .engine import SENSITIVITY_KINDS, TargetSpec, attribute, sensitivity_config
from .evaluation import COMPONENT_METHODS, TOKEN_METHODS, evaluate
from .faithfulness import DEFAULT_K_GRID
from .model import ModelConfig, forward

log = logging.getLogger("dpa")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _counts(text: str) -> list:
    out = []
    for x in text.split(","):
        x = x.strip()
        if x == "all":
            out.append("all")
        elif x:
            try:
                out.append(int(x))
            except ValueError as exc:
                raise argparse.ArgumentTypeError(f"bad component count {x!r}") from exc
    return out


def _emit(doc: dict, out: str | None) -> None:
    text = report.dumps(doc)
    if out is None:
        return
    if out == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(out).write_text(text + "\n")
        log.info("wrote %s", out)


def _load(path: str):
    try:
        return zoo.load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(f"model file not found: {path}") from exc


def cmd_make_model(args) -> int:
    config = None
    if args.kind in ("random", "zero") or any(
            v is not None for v in (args.layers, args.heads, args.d_model, args.d_ffn, args.vocab)):
        base = {
            "random": ModelConfig(2, 4, 32, 64, 32),
            "zero": ModelConfig(2, 4, 32, 64, 32),
            "induction": zoo.INDUCTION_CONFIG,
            "kv-neuron": zoo.KV_CONFIG,
        }[args.kind].to_dict()
        for key, val in (("n_layers", args.layers), ("n_heads", args.heads), ("d_model", args.d_model),
                         ("d_ffn", args.d_ffn), ("vocab_size", args.vocab), ("rope_base", args.rope_base),
                         ("norm_eps", args.norm_eps), ("max_seq_len", args.max_seq_len)):
            if val is not None:
                base[key] = val
        config = ModelConfig.from_dict(base)
    planted = zoo.build(args.kind, config, args.seed)
    zoo.save_model(planted.weights, args.out)
    print(f"wrote {args.kind} model to {args.out}")
    for ref in planted.ground_truth:
        print(f"ground-truth {ref.kind} layer={ref.layer} index={ref.index}")
    for key, val in planted.notes.items():
        print(f"{key}: {val}")
    return 0


def _spec_from_args(args, weights, tokens) -> TargetSpec:
    position = len(tokens) - 1 if args.position is None else args.position
    if not 0 <= position < len(tokens):
        raise ValueError(f"position {position} out of range [0, {len(tokens)})")
    if args.target is None:
        logits = forward(tokens, weights).logits
        target = int(np.argmax(logits[position]))
    else:
        target = args.target
    spec = TargetSpec(target, position)
    spec.validate(weights.config.vocab_size, len(tokens))
    return spec


def cmd_attribute(args) -> int:
    weights = _load(args.model)
    tokens = args.tokens
    spec = _spec_from_args(args, weights, tokens)
    mu = sensitivity_config(args.mu, args.p)
    scores = attribute(tokens, weights, spec, mu)
    doc = report.attribution_report(scores, report.model_description(weights.config, args.model),
                                    tokens, args.top_n, args.full, args.granularity)
    _emit(doc, args.out)
    if args.html:
        Path(args.html).write_text(report.attribution_html(doc))
        log.info("wrote %s", args.html)
    if args.figures:
        from . import plotting

        fig_dir = Path(args.figures)
        plotting.token_bars(tokens, scores.token_scores, fig_dir / "token_scores.png", position=spec.position)
        plotting.component_heatmap(scores.head_scores, fig_dir / "head_scores.png", title="head scores")
        plotting.component_heatmap(scores.neuron_scores, fig_dir / "neuron_scores.png", xlabel="neuron",
                                   title="neuron scores")
    return 0


def _read_instances(path: str) -> list[dict]:
    out = []
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise UsageError(f"instances file not found: {path}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append({"tokens": [int(t) for t in rec["tokens"]], "target": int(rec["target"]),
                        "position": int(rec["position"])})
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{path}:{n}: bad instance record ({exc})") from exc
    if not out:
        raise UsageError(f"{path}: no instances")
    return out


def cmd_evaluate(args) -> int:
    weights = _load(args.model)
    instances = _read_instances(args.instances)
    allowed = TOKEN_METHODS if args.granularity == "token" else COMPONENT_METHODS
    methods = [m.strip() for m in args.method.split(",") if m.strip()]
    for m in methods:
        if m not in allowed:
            raise UsageError(f"unknown method {m!r} for {args.granularity} granularity; choose from {allowed}")
    mu = sensitivity_config(args.mu, args.p)
    results = []
    for m in methods:
        res = evaluate(weights, instances, m, args.granularity, args.k_grid, args.seed, args.token_mode, mu)
        summary = res.summary()
        log.info("%s: dis=%.2f rec=%.2f total=%.2f", m, summary["dis"], summary["rec"], summary["total"])
        results.append(res.to_dict())
    doc = report.evaluation_report(results, report.model_description(weights.config, args.model), args.k_grid)
    _emit(doc, args.out)
    if args.figures:
        from . import plotting

        fig_dir = Path(args.figures)
        for mode in ("disruption", "recovery"):
            curves = {r["method"]: r["mean_curves"][mode] for r in results}
            plotting.faithfulness_curves(curves, fig_dir / f"{mode}.png", title=mode)
    return 0


def cmd_bench(args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    weights = _load(args.model)
    if args.tokens:
        tokens = args.tokens
    else:
        rng = np.random.default_rng(args.seed)
        tokens = [int(t) for t in rng.integers(0, weights.config.vocab_size, size=args.seq_len)]
    spec = _spec_from_args(args, weights, tokens)
    result = run_benchmark(weights, tokens, spec, args.counts, args.repeats, args.seed)
    log.info("dpa ratio (M=max / M=min): %.3f", result["dpa_ratio"])
    if "ap_forwards_per_component" in result:
        log.info("activation patching: %.3f forwards per component", result["ap_forwards_per_component"])
    doc = report.bench_report(result, report.model_description(weights.config, args.model), tokens)
    _emit(doc, args.out)
    if args.figures:
        from . import plotting

        plotting.bench_timings(result, Path(args.figures) / "bench.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-model", help="build a toy model and write it as a DPAW file")
    mk.add_argument("--kind", required=True, choices=zoo.BUILDERS)
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--out", required=True)
    mk.add_argument("--layers", type=int)
    mk.add_argument("--heads", type=int)
    mk.add_argument("--d-model", type=int)
    mk.add_argument("--d-ffn", type=int)
    mk.add_argument("--vocab", type=int)
    mk.add_argument("--rope-base", type=float)
    mk.add_argument("--norm-eps", type=float)
    mk.add_argument("--max-seq-len", type=int)
    mk.set_defaults(func=cmd_make_model)

    def add_target(p):
        p.add_argument("--target", type=int, help="target token id (default: model argmax)")
        p.add_argument("--position", type=int, help="attribution position (default: last)")

    def add_mu(p):
        p.add_argument("--mu", choices=SENSITIVITY_KINDS, default="control-content")
        p.add_argument("--p", type=float, default=0.5)

    at = sub.add_parser("attribute", help="score tokens, heads and neurons for one target")
    at.add_argument("model")
    at.add_argument("--tokens", type=_int_list, required=True, help="comma-separated token ids")
    add_target(at)
    add_mu(at)
    at.add_argument("--granularity", choices=("all", "token", "component"), default="all")
    at.add_argument("--top-n", type=int, default=10)
    at.add_argument("--full", action="store_true", help="include full score arrays")
    at.add_argument("--out", default="-", help="report path, '-' for stdout")
    at.add_argument("--html", help="also write a static HTML page")
    at.add_argument("--figures", help="directory for PNG figures")
    at.set_defaults(func=cmd_attribute)

    ev = sub.add_parser("evaluate", help="faithfulness curves over a JSONL instance file")
    ev.add_argument("model")
    ev.add_argument("--instances", required=True)
    ev.add_argument("--method", required=True, help="method name, or a comma-separated list")
    ev.add_argument("--granularity", choices=("token", "component"), default="component")
    ev.add_argument("--k-grid", type=_float_list, default=list(DEFAULT_K_GRID))
    ev.add_argument("--token-mode", choices=("zero-embed", "remove"), default="zero-embed")
    ev.add_argument("--seed", type=int, default=0)
    add_mu(ev)
    ev.add_argument("--out", default="-")
    ev.add_argument("--figures")
    ev.set_defaults(func=cmd_evaluate)

    be = sub.add_parser("bench", help="time DPA and activation patching against component count")
    be.add_argument("model")
    be.add_argument("--tokens", type=_int_list)
    be.add_argument("--seq-len", type=int, default=32)
    add_target(be)
    be.add_argument("--counts", type=_counts, default=[1, 8, 64, "all"])
    be.add_argument("--repeats", type=int, default=5)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", default="-")
    be.add_argument("--figures")
    be.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, IndexError) as exc:
        print(f"dpa: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
