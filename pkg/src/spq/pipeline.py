"""SVD -> prune -> quantize -> (LoRA) orchestration over a tensor container.

Attention projections get variance-retained SVD, MLP blocks get structured
neuron pruning, and every linear weight (including SVD factors) gets 8-bit
quantization. Embeddings, the output head, norms and biases pass through.
"""
from __future__ import annotations

import enum
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import lora as lora_mod
from . import prune as prune_mod
from . import quant as quant_mod
from . import svd as svd_mod
from .config import PipelineConfig
from .container import TensorContainer, TensorEntry, tensor_bytes

REPORT_SCHEMA = "spq_report_v1"

# hidden-unit roles inside an MLP block
MLP_ROLES = {
    "gate": ("gate_proj",),
    "up": ("up_proj", "fc1"),
    "down": ("down_proj", "fc2"),
}


class PipelineError(ValueError):
    pass


class LayerClass(str, enum.Enum):
    ATTENTION = "attention"
    MLP = "mlp"
    OTHER = "other"


def classify_layer(name: str, attention_patterns=("self_attn", "attn", "attention"),
                   mlp_patterns=("mlp", "fc", "feed_forward")) -> LayerClass:
    if not name:
        raise ValueError("empty tensor name")
    if name.endswith("proj.weight") and any(p in name for p in attention_patterns):
        return LayerClass.ATTENTION
    if any(p in name for p in mlp_patterns):
        return LayerClass.MLP
    return LayerClass.OTHER


def is_linear_weight(name: str, entry: TensorEntry, cls: LayerClass) -> bool:
    return cls is not LayerClass.OTHER and name.endswith(".weight") and len(entry.shape) == 2


def mlp_role(name: str):
    """``(block_prefix, role, kind)`` for MLP tensors, else None.

    ``model.layers.0.mlp.up_proj.weight`` -> ("model.layers.0.mlp", "up", "weight").
    """
    parts = name.split(".")
    for i, part in enumerate(parts):
        for role, keys in MLP_ROLES.items():
            if part in keys:
                kind = ".".join(parts[i + 1:])
                if kind in ("weight", "bias"):
                    return ".".join(parts[:i]), role, kind
    return None


# ---------------------------------------------------------------------------
# stats file
# ---------------------------------------------------------------------------

def stats_to_container(stats: prune_mod.ActivationStats) -> TensorContainer:
    entries = {f"stats.{layer}.magnitude": TensorEntry.from_array(np.asarray(m), "F32")
               for layer, m in stats.magnitudes.items()}
    return TensorContainer(entries, {"stats.p": str(stats.p), "stats.samples": str(stats.samples)})


def stats_from_container(c: TensorContainer) -> prune_mod.ActivationStats:
    mags = {}
    for name in sorted(c.entries):
        if name.startswith("stats.") and name.endswith(".magnitude"):
            mags[name[len("stats."):-len(".magnitude")]] = c.array(name).astype(np.float64)
    try:
        p = int(c.metadata.get("stats.p", "1"))
        samples = int(c.metadata.get("stats.samples", "0"))
    except ValueError:
        raise PipelineError("stats metadata stats.p / stats.samples must be integers") from None
    return prune_mod.ActivationStats(mags, p=p, samples=samples)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    layer_class: str
    dtype: str
    shape_before: list
    bytes_before: int
    actions: list = field(default_factory=list)
    shape_after: list | None = None
    bytes_after: int = 0
    outputs: list = field(default_factory=list)
    svd: dict | None = None
    prune: dict | None = None
    quant: list = field(default_factory=list)
    lora: dict | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "class": self.layer_class, "dtype": self.dtype,
            "actions": self.actions, "shape_before": self.shape_before,
            "shape_after": self.shape_after, "bytes_before": self.bytes_before,
            "bytes_after": self.bytes_after, "outputs": self.outputs, "svd": self.svd,
            "prune": self.prune, "quant": self.quant, "lora": self.lora, "notes": self.notes,
        }


@dataclass
class CompressionReport:
    rows: list[LayerRow]
    bytes_before: int
    bytes_after: int
    config: dict
    notes: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return 1.0 - self.bytes_after / self.bytes_before if self.bytes_before else 0.0

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "layers": [r.to_dict() for r in self.rows],
            "totals": {"bytes_before": self.bytes_before, "bytes_after": self.bytes_after,
                       "ratio": self.ratio},
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def memory_summary(before: TensorContainer, after: TensorContainer) -> dict:
    b = before.total_bytes()
    a = after.total_bytes()
    return {"bytes_before": b, "bytes_after": a, "ratio": 1.0 - a / b if b else 0.0}


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _pmap(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _layer_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2**32)


@dataclass
class _Work:
    """Mutable per-tensor state while the stages run."""
    name: str
    entry: TensorEntry
    cls: LayerClass
    row: LayerRow
    linear: bool
    dense: np.ndarray | None = None           # current float64 value of a linear weight
    reference: np.ndarray | None = None       # original weight restricted to kept neurons
    factors: svd_mod.SvdFactors | None = None
    touched: bool = False
    pruned_value: np.ndarray | None = None     # pruned non-linear tensor (bias)
    extra: dict = field(default_factory=dict)  # name -> TensorEntry (kept_indices)


def run_pipeline(container: TensorContainer, stats, config: PipelineConfig | None = None):
    """Compress ``container``; returns ``(compressed_container, CompressionReport)``.

    ``stats`` is an ActivationStats, a stats TensorContainer, or None when
    pruning is disabled.
    """
    config = config or PipelineConfig()
    if isinstance(stats, TensorContainer):
        stats = stats_from_container(stats)

    works: dict[str, _Work] = {}
    for name in sorted(container.entries):
        entry = container.entries[name]
        cls = classify_layer(name, config.attention_patterns, config.mlp_patterns)
        row = LayerRow(name, cls.value, entry.dtype, list(entry.shape),
                       tensor_bytes(entry.dtype, entry.shape))
        w = _Work(name, entry, cls, row, is_linear_weight(name, entry, cls))
        if w.linear:
            w.dense = entry.array().astype(np.float64)
            w.reference = w.dense
        works[name] = w

    metadata = dict(container.metadata)
    notes: list[str] = []

    if config.svd_enabled:
        _stage_svd(works, config, metadata)
    if config.prune_enabled:
        _stage_prune(works, stats, config, metadata, notes)
    if config.quant_enabled:
        quantized = _stage_quant(works, config, metadata)
        if any(w.cls is LayerClass.OTHER and len(w.entry.shape) == 2 for w in works.values()):
            notes.append("embedding/head/other matrices are not quantized")
    else:
        quantized = {}
    if config.lora_enabled:
        _stage_lora(works, quantized, config, metadata)

    entries: dict[str, TensorEntry] = {}
    for name, w in works.items():
        out = _emit(w, quantized)
        out.update(w.extra)
        w.row.outputs = sorted(out)
        w.row.bytes_after = sum(tensor_bytes(e.dtype, e.shape) for e in out.values())
        if w.row.shape_after is None:
            w.row.shape_after = list(w.entry.shape)
        for k in out:
            if k in entries:
                raise PipelineError(f"output name collision on {k!r}")
        entries.update(out)

    result = TensorContainer(entries, metadata)
    rows = [works[n].row for n in sorted(works)]
    echo = {k: v for k, v in config.to_mapping().items() if k != "workers"}
    report = CompressionReport(rows, container.total_bytes(), result.total_bytes(), echo, notes)
    if sum(r.bytes_after for r in rows) != report.bytes_after:
        raise AssertionError("report rows do not sum to the container total")
    return result, report


def _stage_svd(works, config, metadata):
    targets = [w for w in works.values() if w.linear and w.cls is LayerClass.ATTENTION]

    def factor(w):
        W = w.dense
        if not np.any(W):
            return w, None, "all-zero weight, SVD skipped"
        result = svd_mod.compute_svd(W)
        k = svd_mod.retained_rank(result.singular_values, config.svd_epsilon)
        return w, svd_mod.truncate(result, k, config.svd_epsilon), None

    for w, factors, note in _pmap(factor, targets, config.workers):
        if factors is None:
            w.row.notes.append(note)
            continue
        m, n = w.dense.shape
        k = factors.retained_rank
        info = {"k": k, "rank_ratio": factors.rank_ratio, "epsilon": config.svd_epsilon,
                "gain_bytes_f32": svd_mod.svd_memory_gain(m, n, k)}
        w.row.svd = info
        if config.svd_skip_no_gain and k * (m + n) >= m * n:
            info["applied"] = False
            w.row.notes.append(f"SVD skipped: k={k} gives no memory gain")
            continue
        info["applied"] = True
        w.factors = factors
        w.touched = True
        w.row.actions.append("svd")
        metadata[f"svd.{w.name}"] = factors.metadata_value()


def _stage_prune(works, stats, config, metadata, notes):
    blocks: dict[str, dict[str, str]] = {}
    for name, w in works.items():
        if w.cls is not LayerClass.MLP:
            continue
        role = mlp_role(name)
        if role is None:
            continue
        prefix, r, kind = role
        key = r if kind == "weight" else f"{r}_bias"
        blocks.setdefault(prefix, {})[key] = name
    blocks = {p: b for p, b in blocks.items() if "up" in b and "down" in b}
    if not blocks:
        return
    if stats is None:
        raise PipelineError("pruning is enabled but no activation stats were given")
    missing = sorted(set(stats.magnitudes) - set(blocks))
    if missing:
        raise PipelineError(f"stats reference layers absent from the model: {missing}")
    unmeasured = sorted(set(blocks) - set(stats.magnitudes))
    if unmeasured:
        raise PipelineError(f"missing stats for MLP layers: {unmeasured}")

    plan = prune_mod.plan_pruning(
        prune_mod.ActivationStats({p: stats.magnitudes[p] for p in sorted(blocks)}, stats.p),
        config.prune)
    if plan.degenerate:
        notes.append("all MLP layer means are equal: pruning ratios fall back to the "
                     f"degenerate n=0 case ({config.prune.strategy})")

    def surgery(prefix):
        names = blocks[prefix]
        n_hidden = works[names["up"]].entry.shape[0]
        layer = plan.layers[prefix]
        if stats.magnitudes[prefix].size != n_hidden:
            raise PipelineError(f"stats for {prefix} have {stats.magnitudes[prefix].size} "
                                f"neurons, model has {n_hidden}")
        arrays = {}
        for key, tname in names.items():
            w = works[tname]
            arrays[key] = w.dense if w.dense is not None else w.entry.array().astype(np.float64)
        refs = {k: works[names[k]].reference for k in ("up", "gate", "down") if k in names}
        pruned = prune_mod.apply_structured_prune(arrays, layer.kept_indices)
        pruned_refs = prune_mod.apply_structured_prune(refs, layer.kept_indices)
        return prefix, names, layer, n_hidden, pruned, pruned_refs

    for prefix, names, layer, n_hidden, pruned, refs in _pmap(surgery, sorted(blocks), config.workers):
        count = int(layer.pruned_indices.size)
        info = {"block": prefix, "ratio": layer.ratio, "pruned": count, "neurons": n_hidden}
        metadata[f"prune.{prefix}"] = f"r={layer.ratio!r};pruned={count};n={n_hidden}"
        for key, tname in names.items():
            w = works[tname]
            w.row.prune = info
            if count == 0:
                continue
            w.touched = True
            w.row.actions.append("prune")
            if w.linear:
                w.dense = pruned[key]
                w.reference = refs[key]
            else:
                w.pruned_value = pruned[key]
            w.row.shape_after = list(np.shape(pruned[key]))
        kept = TensorEntry.from_array(layer.kept_indices.astype(np.int32), "I32")
        works[names["up"]].extra[f"{prefix}.kept_indices"] = kept


def _quant_targets(works):
    """``(target_name, work, matrix)`` for every matrix to quantize, in name order."""
    targets = []
    for w in works.values():
        if not w.linear:
            continue
        if w.factors is not None:
            targets.append((f"{w.name}.svd_a", w, w.factors.A))
            targets.append((f"{w.name}.svd_b", w, w.factors.B))
        else:
            targets.append((w.name, w, w.dense))
    return targets


def _stage_quant(works, config, metadata):
    policy = config.quant
    targets = _quant_targets(works)
    if not targets:
        return {}
    if policy.needs_sensitivity:
        sens = _pmap(lambda t: quant_mod.layer_sensitivity(t[2], policy.bits), targets, config.workers)
    else:
        sens = [None] * len(targets)
    infos = [quant_mod.LayerInfo(t[0], t[1].cls.value, s) for t, s in zip(targets, sens)]
    choice, details = quant_mod.select_granularity(infos, policy)

    def run(t):
        tname, w, M = t
        g = choice[tname]
        # scales are stored as F32, so quantize against the F32-rounded values
        scales = quant_mod.compute_scales(M, g, policy.bits).astype(np.float32).astype(np.float64)
        return tname, quant_mod.quantize(M, scales, policy.bits)

    quantized = dict(_pmap(run, targets, config.workers))
    for (tname, w, _), s in zip(targets, sens):
        qt = quantized[tname]
        w.touched = True
        if "quant" not in w.row.actions:
            w.row.actions.append("quant")
        w.row.quant.append({"tensor": tname, "granularity": qt.granularity,
                            "bits": policy.bits, "sensitivity": s})
        metadata[f"quant.{tname}"] = f"b={policy.bits};granularity={qt.granularity}"
    if details.get("threshold") is not None:
        metadata["quant.policy"] = json.dumps(details, sort_keys=True)
    return quantized


def _effective_dense(w, quantized) -> np.ndarray:
    def value(tname, M):
        if tname in quantized:
            return quant_mod.dequantize(quantized[tname])
        return M.astype(np.float32).astype(np.float64)

    if w.factors is not None:
        return value(f"{w.name}.svd_a", w.factors.A) @ value(f"{w.name}.svd_b", w.factors.B)
    return value(w.name, w.dense)


def _stage_lora(works, quantized, config, metadata):
    targets = [w for w in works.values() if w.linear and w.touched]

    def fit(w):
        W_c = _effective_dense(w, quantized)
        adapter = lora_mod.lora_recover(
            w.reference, W_c, rank=config.lora_rank, alpha=config.lora_alpha,
            steps=config.lora_steps, learning_rate=config.lora_learning_rate,
            seed=_layer_seed(config.seed, w.name))
        return w, adapter

    for w, adapter in _pmap(fit, targets, config.workers):
        w.row.actions.append("lora")
        w.row.lora = {"rank": adapter.rank, "alpha": adapter.alpha,
                      "loss_initial": adapter.losses[0], "loss_final": adapter.losses[-1]}
        if config.lora_requantize:
            _requantize_merged(w, adapter, quantized, config, metadata)
            continue
        w.extra[f"{w.name}.lora_a"] = TensorEntry.from_array(adapter.A, "F32")
        w.extra[f"{w.name}.lora_b"] = TensorEntry.from_array(adapter.B, "F32")
        metadata[f"lora.{w.name}"] = adapter.metadata_value()


def _requantize_merged(w, adapter, quantized, config, metadata):
    """Fold the adapter into a dense weight and quantize that instead.

    A factored weight loses its factors: the merged update is full rank in
    general. The granularity is per-channel if any of the layer's quantized
    tensors was per-channel.
    """
    merged = lora_mod.merge_adapter(_effective_dense(w, quantized), adapter)
    old = [t for t in (w.name, f"{w.name}.svd_a", f"{w.name}.svd_b") if t in quantized]
    granularity = (quant_mod.CHANNEL if any(quantized[t].granularity == quant_mod.CHANNEL for t in old)
                   else quant_mod.TENSOR)
    for t in old:
        del quantized[t]
        metadata.pop(f"quant.{t}", None)
    if w.factors is not None:
        metadata.pop(f"svd.{w.name}", None)
        w.factors = None
        w.row.shape_after = list(merged.shape)
        w.row.notes.append("SVD factors merged back into a dense weight by lora.requantize")
    w.dense = merged
    w.row.lora["merged"] = True
    if old:
        bits = config.quant.bits
        scales = quant_mod.compute_scales(merged, granularity, bits).astype(np.float32).astype(np.float64)
        quantized[w.name] = quant_mod.quantize(merged, scales, bits)
        metadata[f"quant.{w.name}"] = f"b={bits};granularity={granularity}"
        w.row.quant = [{"tensor": w.name, "granularity": granularity, "bits": bits, "sensitivity": None}]
        w.row.actions.append("requant")


def _emit(w: _Work, quantized) -> dict[str, TensorEntry]:
    if not w.touched:
        return {w.name: w.entry}
    if not w.linear:
        # pruned bias: keep its dtype
        return {w.name: TensorEntry.from_array(w.pruned_value, w.entry.dtype)}
    out = {}
    if w.factors is not None:
        mats = [(f"{w.name}.svd_a", w.factors.A), (f"{w.name}.svd_b", w.factors.B)]
        w.row.shape_after = [list(w.factors.A.shape), list(w.factors.B.shape)]
    else:
        mats = [(w.name, w.dense)]
    for tname, M in mats:
        if tname in quantized:
            qt = quantized[tname]
            out[tname] = TensorEntry.from_array(qt.values, qt.storage_dtype)
            out[f"{tname}.scale"] = TensorEntry.from_array(qt.scales, "F32")
        else:
            dtype = "F32" if w.factors is not None else w.entry.dtype
            out[tname] = TensorEntry.from_array(M, dtype)
    return out


# ---------------------------------------------------------------------------
# decompression
# ---------------------------------------------------------------------------

def _parse_fields(value: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in value.split(";") if "=" in part)


def decompress_to_dense(c: TensorContainer) -> TensorContainer:
    """Expand a compressed container into plain F32 weights.

    SVD factors are multiplied out, quantized tensors dequantized and LoRA
    adapters merged. Pruned layers keep their reduced shape; ``kept_indices``
    entries are carried over unchanged.
    """
    meta = c.metadata
    used: set[str] = set()
    dense: dict[str, np.ndarray] = {}

    def need(name):
        if name not in c.entries:
            raise PipelineError(f"missing companion tensor {name!r}")
        used.add(name)
        return c.entries[name]

    def load(tname):
        if f"quant.{tname}" in meta:
            values = need(tname).array().astype(np.float64)
            scales = need(f"{tname}.scale").array().astype(np.float64)
            g = _parse_fields(meta[f"quant.{tname}"]).get("granularity", "tensor")
            qt = quant_mod.QuantizedTensor(values, scales, int(_parse_fields(meta[f"quant.{tname}"])["b"]), g)
            return quant_mod.dequantize(qt)
        return need(tname).array().astype(np.float64)

    for key in sorted(meta):
        if key.startswith("svd."):
            name = key[len("svd."):]
            dense[name] = load(f"{name}.svd_a") @ load(f"{name}.svd_b")
    for key in sorted(meta):
        if key.startswith("quant.") and key != "quant.policy":
            tname = key[len("quant."):]
            if tname.endswith(".svd_a") or tname.endswith(".svd_b"):
                continue
            dense[tname] = load(tname)
    for key in sorted(meta):
        if key.startswith("lora."):
            name = key[len("lora."):]
            if name not in dense:
                dense[name] = need(name).array().astype(np.float64)
                used.add(name)
            fields_ = _parse_fields(meta[key])
            adapter = lora_mod.LoraAdapter(need(f"{name}.lora_a").array(),
                                           need(f"{name}.lora_b").array(),
                                           float(fields_["alpha"]))
            dense[name] = lora_mod.merge_adapter(dense[name], adapter)

    entries = {}
    for name, entry in c.entries.items():
        if name in used or name in dense:
            continue
        if entry.dtype in ("F32", "F64"):
            entries[name] = TensorEntry.from_array(entry.array(), "F32")
        else:
            entries[name] = entry
    for name, M in dense.items():
        entries[name] = TensorEntry.from_array(M, "F32")
    kept_meta = {k: v for k, v in meta.items()
                 if not k.startswith(("svd.", "quant.", "lora."))}
    return TensorContainer(entries, kept_meta)
