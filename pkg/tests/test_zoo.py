import json
import struct

import numpy as np
import pytest

from conftest import SMALL
from dpa import ModelConfig, build_random, forward
from dpa.baselines import ComponentRef, activation_patch, patching_scores, target_logit
from dpa.engine import TargetSpec
from dpa.faithfulness import retained_ratio, target_probability
from dpa.model import ConfigError, Intervention
from dpa.zoo import (
    INDUCTION_CONFIG,
    KV_CONFIG,
    FormatError,
    build,
    build_induction,
    build_kv_neuron,
    dumps_model,
    induction_instances,
    kv_instances,
    load_model,
    loads_model,
    save_model,
)


class TestRandom:
    def test_deterministic(self):
        assert dumps_model(build_random(SMALL, 7)) == dumps_model(build_random(SMALL, 7))
        assert dumps_model(build_random(SMALL, 7)) != dumps_model(build_random(SMALL, 8))

    def test_finite_forward(self):
        for seed in range(100):
            w = build_random(SMALL, seed)
            tokens = np.random.default_rng(seed).integers(0, SMALL.vocab_size, 8).tolist()
            assert np.all(np.isfinite(forward(tokens, w).logits))

    def test_build_dispatch(self):
        assert build("random", SMALL, 1).kind == "random"
        assert not np.any(build("zero", SMALL, 1).weights.layers[0].W_O)
        with pytest.raises(ValueError):
            build("transformer")


@pytest.fixture(scope="module")
def induction():
    return build_induction()


@pytest.fixture(scope="module")
def kv():
    return build_kv_neuron()


class TestInduction:
    def test_ground_truth(self, induction):
        assert induction.ground_truth == [ComponentRef("head", 0, 0), ComponentRef("head", 1, 0)]
        for ref in induction.ground_truth:
            ref.validate(induction.config)

    def test_copies_token(self, induction):
        # "A B C A" -> B
        A, B, C = 4, 9, 2
        logits = forward([A, B, C, A], induction.weights).logits
        assert int(np.argmax(logits[-1])) == B

    def test_suite_predictions(self, induction):
        for inst in induction_instances(30, seed=1):
            logits = forward(inst["tokens"], induction.weights).logits
            assert int(np.argmax(logits[inst["position"]])) == inst["target"]

    def test_mlps_disabled(self, induction):
        cache = forward([1, 2, 3, 1], induction.weights).cache
        assert cache.gate_pre.max() <= -40.0

    def test_ablating_induction_head(self, induction):
        inst = induction_instances(1, seed=2)[0]
        tokens, spec = inst["tokens"], TargetSpec(inst["target"], inst["position"])
        p_clean = target_probability(forward(tokens, induction.weights).logits, spec)
        iv = Intervention(head_scale=np.ones((2, 2)))
        iv.head_scale[1, 0] = 0.0
        p = target_probability(forward(tokens, induction.weights, iv).logits, spec)
        assert retained_ratio(p_clean, p) < 0.5

    def test_other_heads_are_inert(self, induction):
        rel = []
        for inst in induction_instances(10, seed=4):
            tokens, spec = inst["tokens"], TargetSpec(inst["target"], inst["position"])
            clean = target_logit(tokens, induction.weights, spec)
            for h in range(1, INDUCTION_CONFIG.n_heads):
                for l in range(2):
                    delta = activation_patch(induction.weights, tokens, ComponentRef("head", l, h), spec, clean)
                    rel.append(abs(delta) / abs(clean))
        assert np.median(rel) < 0.01

    def test_patching_recovers_ground_truth(self, induction):
        inst = induction_instances(1, seed=5)[0]
        heads, _ = patching_scores(induction.weights, inst["tokens"], TargetSpec(inst["target"], inst["position"]))
        top2 = set(map(tuple, np.argwhere(heads >= np.sort(heads.ravel())[-2]).tolist()))
        assert top2 == {(0, 0), (1, 0)}

    def test_config_too_small(self):
        with pytest.raises(ConfigError):
            build_induction(ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ffn=8, vocab_size=12))
        with pytest.raises(ConfigError):
            build_induction(ModelConfig(n_layers=1, n_heads=2, d_model=64, d_ffn=8, vocab_size=12))


class TestKVNeuron:
    def test_trigger_predicts_answer(self, kv):
        for inst in kv_instances(10, seed=0):
            logits = forward(inst["tokens"], kv.weights).logits
            assert int(np.argmax(logits[-1])) == inst["target"]

    def test_ablating_neuron(self, kv):
        inst = kv_instances(1, seed=1)[0]
        tokens, spec = inst["tokens"], TargetSpec(inst["target"], inst["position"])
        p_clean = target_probability(forward(tokens, kv.weights).logits, spec)
        iv = Intervention(neuron_scale=np.ones((1, KV_CONFIG.d_ffn)))
        iv.neuron_scale[0, kv.ground_truth[0].index] = 0.0
        p = target_probability(forward(tokens, kv.weights, iv).logits, spec)
        assert retained_ratio(p_clean, p) < 0.1

    def test_non_trigger_is_baseline(self, kv):
        tokens = [1, 2, 5, 0, 9]
        cache = forward(tokens, kv.weights).cache
        n = kv.ground_truth[0].index
        assert cache.gate_pre[0, :, n].max() <= -40.0
        spec = TargetSpec(7, 4)
        assert abs(activation_patch(kv.weights, tokens, kv.ground_truth[0], spec)) < 1e-12

    def test_patching_recovers_ground_truth(self, kv):
        inst = kv_instances(1, seed=2)[0]
        _, neurons = patching_scores(kv.weights, inst["tokens"], TargetSpec(inst["target"], inst["position"]))
        assert int(np.argmax(neurons[0])) == kv.ground_truth[0].index

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            build_kv_neuron(ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ffn=16, vocab_size=16))
        with pytest.raises(ConfigError):
            build_kv_neuron(trigger=99)


class TestContainer:
    def test_round_trip(self, tmp_path, small_weights):
        path = tmp_path / "m.dpaw"
        save_model(small_weights, path)
        loaded = load_model(path)
        assert loaded.config == small_weights.config
        for name, arr in small_weights.named_tensors().items():
            np.testing.assert_array_equal(loaded.named_tensors()[name], arr)
        save_model(loaded, tmp_path / "again.dpaw")
        assert (tmp_path / "again.dpaw").read_bytes() == path.read_bytes()

    def test_layout(self, tiny_weights):
        data = dumps_model(tiny_weights)
        assert data[:4] == b"DPAW"
        assert struct.unpack("<I", data[4:8])[0] == 1
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen])
        assert header["__config__"]["d_model"] == tiny_weights.config.d_model
        meta = header["embedding"]
        assert meta["dtype"] == "f64" and meta["shape"] == list(tiny_weights.embedding.shape)
        start = 16 + hlen + meta["offset"]
        first = struct.unpack("<d", data[start:start + 8])[0]
        assert first == tiny_weights.embedding[0, 0]

    def test_bad_magic(self, tiny_weights):
        data = bytearray(dumps_model(tiny_weights))
        data[:4] = b"GGUF"
        with pytest.raises(FormatError, match="magic"):
            loads_model(bytes(data))

    def test_truncated(self, tiny_weights):
        data = dumps_model(tiny_weights)
        for cut in (3, 12, 40, len(data) - 8):
            with pytest.raises(FormatError):
                loads_model(data[:cut])

    def _rewrite_header(self, data, edit):
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen])
        edit(header)
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return data[:8] + struct.pack("<Q", len(head)) + head + data[16 + hlen:]

    def test_shape_exceeds_blob(self, tiny_weights):
        def grow(h):
            h["unembedding"]["shape"][0] += 1000
        with pytest.raises(FormatError):
            loads_model(self._rewrite_header(dumps_model(tiny_weights), grow))

    def test_shape_inconsistent_with_config(self, tiny_weights):
        def swap(h):
            h["embedding"]["shape"] = h["embedding"]["shape"][::-1]
        with pytest.raises(FormatError):
            loads_model(self._rewrite_header(dumps_model(tiny_weights), swap))

    def test_trailing_bytes(self, tiny_weights):
        with pytest.raises(FormatError):
            loads_model(dumps_model(tiny_weights) + b"\0" * 8)

    def test_unsupported_version(self, tiny_weights):
        data = dumps_model(tiny_weights)
        with pytest.raises(FormatError):
            loads_model(data[:4] + struct.pack("<I", 2) + data[8:])
