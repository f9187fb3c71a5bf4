import numpy as np
import pytest

from spq import harness
from spq.config import PipelineConfig
from spq.container import TensorContainer, TensorEntry, write_container
from spq.pipeline import LayerClass, classify_layer, decompress_to_dense, run_pipeline

from conftest import SMALL_SPEC


def test_build_is_deterministic():
    a = harness.build_toy_model(SMALL_SPEC)
    b = harness.build_toy_model(SMALL_SPEC)
    assert write_container(a) == write_container(b)
    other = harness.build_toy_model(harness.ToyModelSpec(**{**SMALL_SPEC.__dict__, "seed": 4}))
    assert write_container(other) != write_container(a)


def test_parameter_count():
    spec = harness.ToyModelSpec(vocab=64, d_model=32, n_layers=2, n_heads=4, d_ff=64)
    assert spec.parameter_count() == 24736
    model = harness.build_toy_model(spec)
    assert sum(e.numel for e in model.entries.values()) == 24736
    plain = harness.ToyModelSpec(vocab=64, d_model=32, n_layers=2, n_heads=4, d_ff=64, gated_mlp=False)
    assert sum(e.numel for e in harness.build_toy_model(plain).entries.values()) == plain.parameter_count()


def test_spec_validation_and_mapping():
    with pytest.raises(ValueError):
        harness.ToyModelSpec(d_model=30, n_heads=4)
    spec = harness.ToyModelSpec.from_mapping({"toy.vocab": "16", "d_model": "8", "n_heads": "2"})
    assert (spec.vocab, spec.d_model, spec.n_heads) == (16, 8, 2)
    assert spec.metadata()["toy.vocab"] == "16"


def test_classification_coverage(small_model):
    classes = {n: classify_layer(n) for n in small_model.entries}
    assert sum(c is LayerClass.ATTENTION for c in classes.values()) == 4 * SMALL_SPEC.n_layers
    assert sum(c is LayerClass.MLP for c in classes.values()) == 3 * SMALL_SPEC.n_layers
    assert classes["model.embed_tokens.weight"] is LayerClass.OTHER
    assert classes["lm_head.weight"] is LayerClass.OTHER


def test_forward_shapes(small_model):
    ids = np.arange(10) % SMALL_SPEC.vocab
    logits, records = harness.forward(small_model, ids)
    assert logits.shape == (10, SMALL_SPEC.vocab) and logits.dtype == np.float32
    assert sorted(records) == [f"model.layers.{l}.mlp" for l in range(SMALL_SPEC.n_layers)]
    assert all(h.shape == (10, SMALL_SPEC.d_ff) for h in records.values())
    with pytest.raises(ValueError):
        harness.forward(small_model, [0])
    with pytest.raises(ValueError):
        harness.forward(small_model, [0, SMALL_SPEC.vocab])


def test_zero_head_gives_uniform_logits(small_model):
    entries = dict(small_model.entries)
    entries["lm_head.weight"] = TensorEntry.from_array(np.zeros((SMALL_SPEC.vocab, SMALL_SPEC.d_model), np.float32))
    model = TensorContainer(entries, small_model.metadata)
    logits, _ = harness.forward(model, [1, 2, 3])
    assert not logits.any()
    nll = harness.next_token_nll(logits, [1, 2, 3])
    np.testing.assert_allclose(nll, np.log(SMALL_SPEC.vocab))


def test_uniform_perplexity_equals_vocab():
    spec = harness.ToyModelSpec(vocab=16, d_model=8, n_layers=1, n_heads=2, d_ff=16)
    model = harness.build_toy_model(spec)
    entries = dict(model.entries)
    entries["lm_head.weight"] = TensorEntry.from_array(np.zeros((16, 8), np.float32))
    model = TensorContainer(entries, model.metadata)
    res = harness.evaluate(model, model, harness.token_batches(16, 2, 20, seed=1))
    assert res.pseudo_perplexity == pytest.approx(16.0, rel=1e-12)
    assert res.divergence == 0.0
    assert res.tokens == 2 * 19


def test_causal_masking(small_model):
    ids = np.array([3, 1, 4, 1, 5, 9, 2, 6])
    full, _ = harness.forward(small_model, ids)
    changed = ids.copy()
    changed[-1] = 7
    other, _ = harness.forward(small_model, changed)
    np.testing.assert_array_equal(full[:-1], other[:-1])
    assert not np.array_equal(full[-1], other[-1])


def test_decompress_roundtrip_forward(small_model):
    out, _ = run_pipeline(small_model, None, PipelineConfig.off())
    dense = decompress_to_dense(out)
    ids = np.arange(12) % SMALL_SPEC.vocab
    np.testing.assert_allclose(harness.forward(dense, ids)[0], harness.forward(small_model, ids)[0], atol=1e-5)


def test_compressed_model_needs_decompression(small_model, small_stats):
    out, _ = run_pipeline(small_model, small_stats, PipelineConfig())
    with pytest.raises(ValueError):
        harness.forward(out, [1, 2])
    logits, records = harness.forward(decompress_to_dense(out), [1, 2, 3])
    assert logits.shape == (3, SMALL_SPEC.vocab)
    # the layer with the largest mean activation gets r_min = 0
    widths = sorted(h.shape[1] for h in records.values())
    assert widths[0] < SMALL_SPEC.d_ff and widths[-1] == SMALL_SPEC.d_ff


def test_stats_shapes_and_determinism(small_model):
    batches = harness.token_batches(SMALL_SPEC.vocab, 3, 16, seed=2)
    a = harness.collect_activation_stats(small_model, batches, p=1)
    b = harness.collect_activation_stats(small_model, batches, p=1)
    assert a.samples == 3 and a.p == 1
    for name, m in a.magnitudes.items():
        assert m.shape == (SMALL_SPEC.d_ff,) and np.all(m >= 0)
        np.testing.assert_array_equal(m, b.magnitudes[name])
    assert write_container(harness.collect_stats(small_model, batches)) == \
        write_container(harness.collect_stats(small_model, batches))


def test_token_batches():
    a = harness.token_batches(32, 4, 50, seed=9)
    assert len(a) == 4 and all(x.shape == (50,) for x in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, harness.token_batches(32, 4, 50, seed=9)))
    counts = np.bincount(np.concatenate(a), minlength=32)
    assert counts[0] > counts[16]          # Zipf skew


def test_evaluate_identical_and_degraded(small_model, small_stats):
    batches = harness.token_batches(SMALL_SPEC.vocab, 2, 32, seed=11)
    same = harness.evaluate(small_model, small_model, batches)
    assert same.divergence == 0.0
    assert same.pseudo_perplexity == same.baseline_perplexity
    kls = []
    for eps, rmax in [(0.96, 0.05), (0.90, 0.15), (0.84, 0.30)]:
        cfg = PipelineConfig().with_updates({"svd.epsilon": str(eps), "prune.r_max": str(rmax)})
        out, _ = run_pipeline(small_model, small_stats, cfg)
        kls.append(harness.evaluate(small_model, out, batches).divergence)
    assert 0 < kls[0] <= kls[1] <= kls[2]


def test_kl_divergence_examples():
    z = np.array([[0.0, 0.0]])
    assert harness.kl_divergence(z, z)[0] == 0.0
    p = np.log([[0.25, 0.75]])
    q = np.log([[0.5, 0.5]])
    expected = 0.25 * np.log(0.5) + 0.75 * np.log(1.5)
    assert harness.kl_divergence(p, q)[0] == pytest.approx(expected, rel=1e-12)
