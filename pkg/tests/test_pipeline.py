import json

import numpy as np
import pytest

from spq import harness
from spq.config import PipelineConfig
from spq.container import TensorContainer, TensorEntry, read_container, write_container
from spq.pipeline import (LayerClass, PipelineError, classify_layer, decompress_to_dense,
                          memory_summary, mlp_role, run_pipeline, stats_from_container)
from spq.prune import ActivationStats

from conftest import SMALL_SPEC


def _cfg(**kw):
    return PipelineConfig.off().with_updates({k.replace("__", "."): str(v).lower() if isinstance(v, bool) else str(v)
                                              for k, v in kw.items()})


def test_classify_examples():
    assert classify_layer("model.layers.0.self_attn.q_proj.weight") is LayerClass.ATTENTION
    assert classify_layer("model.layers.0.mlp.up_proj.weight") is LayerClass.MLP
    assert classify_layer("model.embed_tokens.weight") is LayerClass.OTHER
    assert classify_layer("lm_head.weight") is LayerClass.OTHER
    assert classify_layer("model.layers.0.input_layernorm.weight") is LayerClass.OTHER
    assert classify_layer("decoder.layers.1.fc1.weight") is LayerClass.MLP
    assert classify_layer("model.layers.0.self_attn.rotary_emb.inv_freq") is LayerClass.OTHER
    with pytest.raises(ValueError):
        classify_layer("")


def test_mlp_role():
    assert mlp_role("model.layers.0.mlp.up_proj.weight") == ("model.layers.0.mlp", "up", "weight")
    assert mlp_role("decoder.layers.1.fc2.bias") == ("decoder.layers.1", "down", "bias")
    assert mlp_role("model.layers.0.self_attn.q_proj.weight") is None


def test_all_stages_off_is_identity(small_model):
    out, report = run_pipeline(small_model, None, PipelineConfig.off())
    assert write_container(out) == write_container(small_model)
    assert report.ratio == 0.0
    assert all(r.actions == [] for r in report.rows)


def test_report_rows_sum_and_cover(small_model, small_stats):
    out, report = run_pipeline(small_model, small_stats, PipelineConfig())
    assert sum(r.bytes_before for r in report.rows) == report.bytes_before == small_model.total_bytes()
    assert sum(r.bytes_after for r in report.rows) == report.bytes_after == out.total_bytes()
    outputs = [o for r in report.rows for o in r.outputs]
    assert sorted(outputs) == sorted(out.entries)
    assert len(outputs) == len(set(outputs))
    assert sorted(r.name for r in report.rows) == sorted(small_model.entries)
    d = json.loads(report.to_json())
    assert d["schema"] == "spq_report_v1"
    assert d["totals"]["bytes_after"] == report.bytes_after
    assert "workers" not in d["config"]


def test_full_spq_beats_quant_only(small_model, small_stats):
    _, q = run_pipeline(small_model, None, _cfg(quant__enabled=True))
    _, full = run_pipeline(small_model, small_stats, PipelineConfig())
    assert full.ratio > q.ratio > 0.5
    assert any("svd" in r.actions for r in full.rows)
    assert any("prune" in r.actions for r in full.rows)


def test_quant_only_decompress_error_bound(small_model):
    out, _ = run_pipeline(small_model, None, _cfg(quant__enabled=True))
    dense = decompress_to_dense(out)
    assert sorted(dense.entries) == sorted(small_model.entries)
    for name, entry in small_model.entries.items():
        W = entry.array().astype(np.float64)
        if f"quant.{name}" not in out.metadata:
            np.testing.assert_array_equal(dense.array(name), entry.array())
            continue
        s = out.array(f"{name}.scale").astype(np.float64)
        s = s[:, None] if s.size == W.shape[0] and s.size > 1 else s[0]
        err = np.abs(dense.array(name).astype(np.float64) - W)
        # F32 storage of the dequantized value adds one rounding
        assert np.all(err <= s / 2 + 1e-6 * np.abs(W) + 1e-12)


def test_svd_only_decompress_matches_truncation(small_model):
    out, report = run_pipeline(small_model, None, _cfg(svd__enabled=True, svd__epsilon=1.0,
                                                       svd__skip_no_gain=False))
    dense = decompress_to_dense(out)
    for name in small_model.entries:
        np.testing.assert_allclose(dense.array(name), small_model.array(name), atol=1e-5)
    _, skipped = run_pipeline(small_model, None, _cfg(svd__enabled=True, svd__epsilon=1.0))
    assert skipped.ratio == 0.0
    assert all("SVD skipped" in " ".join(r.notes) for r in skipped.rows if r.layer_class == "attention")


def test_quant_only_report_idempotent(small_model):
    cfg = _cfg(quant__enabled=True)
    out1, r1 = run_pipeline(small_model, None, cfg)
    dense = decompress_to_dense(out1)
    out2, r2 = run_pipeline(dense, None, cfg)
    assert write_container(out2) == write_container(out1)
    assert r1.to_json() == r2.to_json()


def test_stage_locality(small_model, small_stats):
    out, report = run_pipeline(small_model, None, _cfg(svd__enabled=True))
    for r in report.rows:
        if r.actions:
            assert r.layer_class == "attention" and r.actions == ["svd"]
    out, report = run_pipeline(small_model, small_stats, _cfg(prune__enabled=True))
    for r in report.rows:
        if r.actions:
            assert r.layer_class == "mlp" and r.actions == ["prune"]
    for name in small_model.entries:
        if classify_layer(name) is not LayerClass.MLP:
            assert out.entries[name] == small_model.entries[name]


def test_prune_outputs(small_model, small_stats):
    out, report = run_pipeline(small_model, small_stats, _cfg(prune__enabled=True))
    stats = stats_from_container(small_stats)
    for prefix in stats.magnitudes:
        kept = out.array(f"{prefix}.kept_indices")
        fields = dict(p.split("=") for p in out.metadata[f"prune.{prefix}"].split(";"))
        n = int(fields["n"])
        assert n == SMALL_SPEC.d_ff and kept.size == n - int(fields["pruned"])
        assert np.all(np.diff(kept) > 0)
        up = out.array(f"{prefix}.up_proj.weight")
        np.testing.assert_array_equal(up, small_model.array(f"{prefix}.up_proj.weight")[kept])
        down = out.array(f"{prefix}.down_proj.weight")
        np.testing.assert_array_equal(down, small_model.array(f"{prefix}.down_proj.weight")[:, kept])


def test_compression_monotone_in_knobs(small_model, small_stats):
    ratios = []
    for eps, rmax in [(0.96, 0.05), (0.90, 0.15), (0.84, 0.30)]:
        cfg = PipelineConfig().with_updates({"svd.epsilon": str(eps), "prune.r_max": str(rmax)})
        ratios.append(run_pipeline(small_model, small_stats, cfg)[1].ratio)
    assert ratios == sorted(ratios)


@pytest.mark.parametrize("mode", ["per_tensor", "per_channel", "LNH", "PBH", "MSH"])
def test_determinism_across_runs_and_workers(small_model, small_stats, mode):
    cfg = PipelineConfig().with_updates({"quant.mode": mode, "lora.enabled": "true", "lora.steps": "3"})
    a, ra = run_pipeline(small_model, small_stats, cfg)
    b, rb = run_pipeline(small_model, small_stats, cfg)
    c, rc = run_pipeline(small_model, small_stats, cfg.with_updates({"workers": "4"}))
    assert write_container(a) == write_container(b) == write_container(c)
    assert ra.to_json() == rb.to_json() == rc.to_json()


def test_missing_stats_errors(small_model, small_stats):
    with pytest.raises(PipelineError):
        run_pipeline(small_model, None, PipelineConfig())
    stats = stats_from_container(small_stats)
    partial = ActivationStats({k: v for k, v in list(stats.magnitudes.items())[:1]}, 1)
    with pytest.raises(PipelineError, match="missing stats"):
        run_pipeline(small_model, partial, PipelineConfig())
    extra = ActivationStats({**stats.magnitudes, "model.layers.9.mlp": np.ones(4)}, 1)
    with pytest.raises(PipelineError, match="absent"):
        run_pipeline(small_model, extra, PipelineConfig())
    wrong = ActivationStats({k: v[:-1] for k, v in stats.magnitudes.items()}, 1)
    with pytest.raises(PipelineError, match="neurons"):
        run_pipeline(small_model, wrong, PipelineConfig())


def test_opt_naming_with_biases(rng):
    arrays = {
        "decoder.layers.0.self_attn.q_proj.weight": rng.standard_normal((8, 8)),
        "decoder.layers.0.fc1.weight": rng.standard_normal((16, 8)),
        "decoder.layers.0.fc1.bias": rng.standard_normal(16),
        "decoder.layers.0.fc2.weight": rng.standard_normal((8, 16)),
        "decoder.layers.0.fc2.bias": rng.standard_normal(8),
        "decoder.layers.1.fc1.weight": rng.standard_normal((16, 8)),
        "decoder.layers.1.fc2.weight": rng.standard_normal((8, 16)),
    }
    model = TensorContainer.from_arrays({k: v.astype(np.float32) for k, v in arrays.items()})
    stats = ActivationStats({"decoder.layers.0": np.arange(16.0) + 1, "decoder.layers.1": np.full(16, 100.0)}, 1)
    out, report = run_pipeline(model, stats, _cfg(prune__enabled=True, prune__r_max=0.5,
                                                  prune__strategy="linear"))
    assert out["decoder.layers.0.fc1.weight"].shape == (8, 8)
    assert out["decoder.layers.0.fc1.bias"].shape == (8,)
    assert out["decoder.layers.0.fc2.weight"].shape == (8, 8)
    assert out["decoder.layers.0.fc2.bias"].shape == (8,)      # output bias untouched
    np.testing.assert_array_equal(out.array("decoder.layers.0.kept_indices"), np.arange(8, 16))
    assert out["decoder.layers.1.fc1.weight"].shape == (16, 8)


def test_lora_stage(small_model, small_stats):
    cfg = PipelineConfig().with_updates({"lora.enabled": "true", "lora.steps": "20", "lora.rank": "2"})
    out, report = run_pipeline(small_model, small_stats, cfg)
    rows = [r for r in report.rows if r.lora]
    assert rows and all(r.lora["loss_final"] <= r.lora["loss_initial"] for r in rows)
    name = rows[0].name
    assert out[f"{name}.lora_a"].shape[0] == 2
    dense = decompress_to_dense(out)
    assert not any(k.startswith("lora.") for k in dense.metadata)


def test_decompress_missing_companion(small_model):
    out, _ = run_pipeline(small_model, None, _cfg(quant__enabled=True))
    name = next(k for k in out.entries if k.endswith(".scale"))
    broken = TensorContainer({k: v for k, v in out.entries.items() if k != name}, out.metadata)
    with pytest.raises(PipelineError, match="missing companion"):
        decompress_to_dense(broken)


def test_memory_summary_f32_to_f64():
    a = TensorContainer.from_arrays({"w": np.ones((4, 4))})
    b = TensorContainer.from_arrays({"w": np.ones((4, 4), np.float32)})
    assert memory_summary(a, b)["ratio"] == 0.5
    c = TensorContainer({"w": TensorEntry.from_array(np.ones((4, 4)), "I8"),
                         "w.scale": TensorEntry.from_array(np.ones(4), "F32")})
    s = memory_summary(b, c)
    assert (s["bytes_before"], s["bytes_after"]) == (64, 32)
    assert s["ratio"] == 0.5


def test_compressed_container_roundtrips_through_bytes(small_model, small_stats):
    out, _ = run_pipeline(small_model, small_stats, PipelineConfig())
    raw = write_container(out)
    assert write_container(read_container(raw)) == raw


def test_lora_requantize(small_model, small_stats):
    base = PipelineConfig().with_updates({"lora.enabled": "true", "lora.steps": "20", "lora.rank": "2"})
    kept, _ = run_pipeline(small_model, small_stats, base)
    out, report = run_pipeline(small_model, small_stats, base.with_updates({"lora.requantize": "true"}))
    assert not any(k.endswith((".lora_a", ".lora_b", ".svd_a", ".svd_b")) for k in out.entries)
    assert not any(k.startswith(("lora.", "svd.")) for k in out.metadata)
    rows = [r for r in report.rows if r.lora]
    assert rows and all(r.actions[-2:] == ["lora", "requant"] for r in rows)
    assert all(out[r.name].dtype == "I8" for r in rows)
    assert sum(r.bytes_after for r in report.rows) == out.total_bytes()
    # merged weights decompress to the same shapes as the adapter-carrying output
    a, b = decompress_to_dense(out), decompress_to_dense(kept)
    assert {k: e.shape for k, e in a.entries.items()} == {k: e.shape for k, e in b.entries.items()}
    for r in rows:
        diff = np.abs(a.array(r.name) - b.array(r.name)).max()
        assert diff <= np.abs(b.array(r.name)).max() / 127 + 1e-6
