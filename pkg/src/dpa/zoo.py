"""Toy models with known ground truth, and the DPAW weight container.

Planted models place every signal in dedicated residual dimensions:
dimension 0 carries a constant bias feature, followed by disjoint blocks
for token identity, previous-token identity and output logits. All
non-planted weights are small seeded noise.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import ComponentRef
from .model import ConfigError, ModelConfig, ModelWeights, rope_frequencies

MAGIC = b"DPAW"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a DPAW file is malformed."""


@dataclass
class PlantedModel:
    weights: ModelWeights
    kind: str
    seed: int
    ground_truth: list[ComponentRef] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.weights.config


# --- random models -----------------------------------------------------------


def build_random(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Gaussian weights from a seeded PCG64 stream.

    Embeddings have unit-variance entries; every projection uses std
    ``1/sqrt(fan_in)``, with the two output projections further scaled by
    ``1/sqrt(2L)`` so residual writes stay small relative to the stream.
    Norm scales are ``1 + 0.1 * N(0, 1)``.
    """
    rng = np.random.default_rng(seed)
    d, f, v, L = config.d_model, config.d_ffn, config.vocab_size, config.n_layers
    out_scale = 1.0 / math.sqrt(2 * max(L, 1))

    def gauss(*shape, std=1.0):
        return rng.standard_normal(shape) * std

    embedding = gauss(v, d)
    layers = []
    for _ in range(L):
        layers.append({
            "W_Q": gauss(d, d, std=d ** -0.5),
            "W_K": gauss(d, d, std=d ** -0.5),
            "W_V": gauss(d, d, std=d ** -0.5),
            "W_O": gauss(d, d, std=d ** -0.5 * out_scale),
            "W_G": gauss(d, f, std=d ** -0.5),
            "W_U": gauss(d, f, std=d ** -0.5),
            "W_D": gauss(f, d, std=f ** -0.5 * out_scale),
            "attn_norm": 1.0 + 0.1 * gauss(d),
            "mlp_norm": 1.0 + 0.1 * gauss(d),
        })
    final_norm = 1.0 + 0.1 * gauss(d)
    unembedding = gauss(d, v, std=d ** -0.5)
    return ModelWeights.build(config, embedding, layers, final_norm, unembedding)


def zero_model(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Random embeddings/unembedding, every layer weight zero, unit norms."""
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    layers = [{
        "W_Q": np.zeros((d, d)), "W_K": np.zeros((d, d)), "W_V": np.zeros((d, d)), "W_O": np.zeros((d, d)),
        "W_G": np.zeros((d, f)), "W_U": np.zeros((d, f)), "W_D": np.zeros((f, d)),
        "attn_norm": np.ones(d), "mlp_norm": np.ones(d),
    } for _ in range(config.n_layers)]
    return ModelWeights.build(config, rng.standard_normal((v, d)), layers, np.ones(d),
                              rng.standard_normal((d, v)) * d ** -0.5)


def _noise_layers(rng, config: ModelConfig, std: float):
    d, f = config.d_model, config.d_ffn
    return [{
        "W_Q": rng.standard_normal((d, d)) * std,
        "W_K": rng.standard_normal((d, d)) * std,
        "W_V": rng.standard_normal((d, d)) * std,
        "W_O": rng.standard_normal((d, d)) * std,
        "W_G": rng.standard_normal((d, f)) * std,
        "W_U": rng.standard_normal((d, f)) * std,
        "W_D": rng.standard_normal((f, d)) * std,
        "attn_norm": np.ones(d),
        "mlp_norm": np.ones(d),
    } for _ in range(config.n_layers)]


# --- induction circuit -----------------------------------------------------------

INDUCTION_CONFIG = ModelConfig(n_layers=2, n_heads=2, d_model=64, d_ffn=32, vocab_size=12, max_seq_len=32)

# attention logit targets for the planted heads
_PREV_SHARPNESS = 25.0
_MATCH_LOGIT = 4.0
_UNEMBED_GAIN = 8.0
_GATE_OFF = -15.0
_NOISE = 0.02
_DISTRACTOR_GAIN = 0.25


def _low_frequency_pairs(config: ModelConfig, needed: int) -> list[int]:
    """Indices of the ``needed`` slowest RoPE pairs; raises if they rotate too far."""
    theta = rope_frequencies(config.head_dim, config.rope_base)
    pairs = list(np.argsort(theta)[:needed])
    if len(pairs) < needed or theta[pairs].max() * config.max_seq_len > 0.35:
        raise ConfigError("not enough slow rotary pairs to host content matching")
    return sorted(int(p) for p in pairs)


def build_induction(config: ModelConfig = INDUCTION_CONFIG, seed: int = 0) -> PlantedModel:
    """Two-layer induction circuit: ``... A B ... A`` predicts ``B``.

    Layer 0 head 0 attends to the previous position (a rotary offset pattern
    read off the bias feature) and copies that token into the
    previous-token block. Layer 1 head 0 queries with the current token and
    keys on ``prev - current``, so it attends to the position right after an
    earlier occurrence of the current token and copies that token to the
    output block. All MLP gates sit below -40.
    """
    V, d, dh, H = config.vocab_size, config.d_model, config.head_dim, config.n_heads
    if config.n_layers != 2 or H < 2:
        raise ConfigError("induction model needs exactly 2 layers and at least 2 heads")
    if d < 3 * V + 1 or dh < V:
        raise ConfigError("d_model must be >= 3*vocab+1 and head_dim >= vocab")
    slow = _low_frequency_pairs(config, (V + 1) // 2)
    theta = rope_frequencies(dh, config.rope_base)
    fast = [f for f in range(dh // 2) if 0.05 <= theta[f] <= 1.0][:5]
    if len(fast) < 3:
        raise ConfigError("not enough fast rotary pairs for the previous-token head")

    rng = np.random.default_rng(seed)
    bias, E, P, O = 0, 1, 1 + V, 1 + 2 * V
    layers = _noise_layers(rng, config, _NOISE)
    embedding = rng.standard_normal((V, d)) * _NOISE
    embedding[:, bias] = 1.0
    embedding[np.arange(V), E + np.arange(V)] = 1.0

    # expected RMS denominators at each norm site (bias + token, then + prev)
    sigma0 = math.sqrt(2.0 / d)
    sigma1 = math.sqrt(3.0 / d)
    sigma_f = math.sqrt((3.0 + 0.8) / d)

    # layer 0, head 0: previous-token head
    L0 = layers[0]
    cols = slice(0, dh)
    for W in ("W_Q", "W_K", "W_V", "W_O"):
        if W == "W_O":
            L0[W][cols] = 0.0
        else:
            L0[W][:, cols] = 0.0
    a = math.sqrt(_PREV_SHARPNESS * math.sqrt(dh)) * sigma0
    for f in fast:
        L0["W_Q"][bias, 2 * f] = a * math.cos(theta[f])
        L0["W_Q"][bias, 2 * f + 1] = -a * math.sin(theta[f])
        L0["W_K"][bias, 2 * f] = a
    for t in range(V):
        L0["W_V"][E + t, t] = sigma0
        L0["W_O"][t, P + t] = 1.0

    # layer 1, head 0: induction head
    L1 = layers[1]
    for W in ("W_Q", "W_K", "W_V", "W_O"):
        if W == "W_O":
            L1[W][cols] = 0.0
        else:
            L1[W][:, cols] = 0.0
    codes = [2 * slow[t // 2] + (t % 2) for t in range(V)]
    b = math.sqrt(_MATCH_LOGIT * math.sqrt(dh)) * sigma1
    for t in range(V):
        L1["W_Q"][E + t, codes[t]] = b
        L1["W_K"][P + t, codes[t]] = b
        L1["W_K"][E + t, codes[t]] = -b
        L1["W_V"][E + t, t] = sigma1
        L1["W_O"][t, O + t] = 1.0

    for layer in layers:
        layer["W_G"][bias, :] = _GATE_OFF
        # distractor heads keep random patterns but write weakly
        layer["W_O"][dh:] *= _DISTRACTOR_GAIN

    unembedding = rng.standard_normal((d, V)) * _NOISE
    unembedding[O + np.arange(V), np.arange(V)] = _UNEMBED_GAIN * sigma_f
    weights = ModelWeights.build(config, embedding, layers, np.ones(d), unembedding)
    return PlantedModel(
        weights, "induction", seed,
        [ComponentRef("head", 0, 0), ComponentRef("head", 1, 0)],
        {"description": "L0.H0 previous-token head, L1.H0 induction head"},
    )


def induction_instances(n: int, seed: int = 0, length: int = 8, config: ModelConfig = INDUCTION_CONFIG):
    """Random ``... A B ... A`` prompts; returns dicts with tokens/target/position."""
    rng = np.random.default_rng(seed)
    V = config.vocab_size
    if length < 3 or length - 1 > V:
        raise ValueError("length must be in [3, vocab_size + 1]")
    out = []
    for _ in range(n):
        prefix = rng.permutation(V)[:length - 1]
        k = int(rng.integers(0, length - 2))
        tokens = [int(t) for t in prefix] + [int(prefix[k])]
        out.append({"tokens": tokens, "target": int(prefix[k + 1]), "position": length - 1})
    return out


# --- key-value neuron ------------------------------------------------------------

KV_CONFIG = ModelConfig(n_layers=1, n_heads=2, d_model=32, d_ffn=16, vocab_size=16, max_seq_len=32)


def build_kv_neuron(config: ModelConfig = KV_CONFIG, seed: int = 0, trigger: int = 3,
                    answer: int = 7, neuron: int = 5) -> PlantedModel:
    """One-layer model where neuron ``neuron`` fires on ``trigger`` and writes ``answer``.

    The gate reads the trigger's token dimension against a negative bias so
    it sits near +8 on the trigger and below -40 elsewhere; the up path
    reads the constant bias feature and the down row writes a dedicated
    dimension that only the answer's unembedding column reads.
    """
    V, d, F = config.vocab_size, config.d_model, config.d_ffn
    if config.n_layers != 1:
        raise ConfigError("kv-neuron model needs exactly 1 layer")
    if d < V + 2:
        raise ConfigError("d_model must be >= vocab_size + 2")
    for name, val, lim in (("trigger", trigger, V), ("answer", answer, V), ("neuron", neuron, F)):
        if not 0 <= val < lim:
            raise ConfigError(f"{name} index out of range")
    rng = np.random.default_rng(seed)
    bias, E, A = 0, 1, 1 + V
    layers = _noise_layers(rng, config, 0.1 * d ** -0.5)
    embedding = rng.standard_normal((V, d)) * 0.05
    embedding[:, bias] = 1.0
    embedding[np.arange(V), E + np.arange(V)] = 1.0
    embedding[:, A] = 0.0
    sigma = math.sqrt(2.0 / d)

    layer = layers[0]
    layer["W_G"][:, neuron] = 0.0
    layer["W_U"][:, neuron] = 0.0
    layer["W_D"][neuron] = 0.0
    layer["W_G"][bias, neuron] = -48.0 * sigma
    layer["W_G"][E + trigger, neuron] = 56.0 * sigma
    layer["W_U"][bias, neuron] = sigma
    layer["W_D"][neuron, A] = 1.0
    # the answer dimension is private to the planted neuron
    for other in range(F):
        if other != neuron:
            layer["W_D"][other, A] = 0.0
    layer["W_O"][:, A] = 0.0

    unembedding = rng.standard_normal((d, V)) * 0.1 * d ** -0.5
    unembedding[A] = 0.0
    unembedding[A, answer] = 1.5
    weights = ModelWeights.build(config, embedding, layers, np.ones(d), unembedding)
    return PlantedModel(
        weights, "kv-neuron", seed, [ComponentRef("neuron", 0, neuron)],
        {"trigger": trigger, "answer": answer},
    )


def kv_instances(n: int, seed: int = 0, length: int = 6, trigger: int = 3, answer: int = 7,
                 config: ModelConfig = KV_CONFIG):
    """Prompts ending in the trigger token, with the answer as target."""
    rng = np.random.default_rng(seed)
    V = config.vocab_size
    others = [t for t in range(V) if t != trigger]
    out = []
    for _ in range(n):
        tokens = [int(t) for t in rng.choice(others, size=length - 1)] + [trigger]
        out.append({"tokens": tokens, "target": answer, "position": length - 1})
    return out


BUILDERS = ("random", "induction", "kv-neuron", "zero")


def build(kind: str, config: ModelConfig | None = None, seed: int = 0) -> PlantedModel:
    if kind == "random":
        if config is None:
            config = ModelConfig(n_layers=2, n_heads=4, d_model=32, d_ffn=64, vocab_size=32)
        return PlantedModel(build_random(config, seed), "random", seed)
    if kind == "zero":
        if config is None:
            config = ModelConfig(n_layers=2, n_heads=4, d_model=32, d_ffn=64, vocab_size=32)
        return PlantedModel(zero_model(config, seed), "zero", seed)
    if kind == "induction":
        return build_induction(config or INDUCTION_CONFIG, seed)
    if kind == "kv-neuron":
        return build_kv_neuron(config or KV_CONFIG, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {BUILDERS}")


# --- DPAW container ----------------------------------------------------------------


def dumps_model(weights: ModelWeights) -> bytes:
    """Serialize to DPAW bytes.

    Layout: ``b"DPAW"``, u32 LE version, u64 LE header length, UTF-8 JSON
    header, then a little-endian float64 row-major blob. The header maps
    each tensor name to ``{"shape", "dtype": "f64", "offset"}`` (byte offset
    into the blob) and ``"__config__"`` to the model config.
    """
    header: dict = {"__config__": weights.config.to_dict()}
    chunks = []
    offset = 0
    for name, arr in weights.named_tensors().items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def loads_model(data: bytes) -> ModelWeights:
    if len(data) < 16:
        raise FormatError("truncated file: missing preamble")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise FormatError("truncated file: header overruns data")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header.pop("__config__"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid header: {exc}") from exc
    except ConfigError as exc:
        raise FormatError(f"invalid config: {exc}") from exc
    blob = memoryview(data)[16 + hlen:]
    tensors = {}
    end = 0
    for name, meta in header.items():
        if meta.get("dtype") != "f64":
            raise FormatError(f"{name}: unsupported dtype {meta.get('dtype')!r}")
        shape = tuple(int(s) for s in meta["shape"])
        start = int(meta["offset"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or start + nbytes > len(blob):
            raise FormatError(f"{name}: declared shape {shape} exceeds blob length")
        tensors[name] = np.frombuffer(blob[start:start + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        end = max(end, start + nbytes)
    if end != len(blob):
        raise FormatError(f"blob length {len(blob)} does not match header ({end} bytes declared)")
    try:
        layers = [{k: tensors[f"layers.{l}.{k}"] for k in
                   ("W_Q", "W_K", "W_V", "W_O", "W_G", "W_U", "W_D", "attn_norm", "mlp_norm")}
                  for l in range(config.n_layers)]
        return ModelWeights.build(config, tensors["embedding"], layers, tensors["final_norm"],
                                  tensors["unembedding"])
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc}") from exc
    except ConfigError as exc:
        raise FormatError(f"shape mismatch: {exc}") from exc


def save_model(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(dumps_model(weights))


def load_model(path) -> ModelWeights:
    return loads_model(Path(path).read_bytes())
