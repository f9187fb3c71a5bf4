"""Deterministic desk-scale decoder-only transformer.

Generates LLaMA-named weights, calibration statistics for pruning, and the
fidelity numbers (KL divergence, pseudo-perplexity) used to compare a
compressed model against its baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import prune as prune_mod
from .config import ConfigError, as_bool, as_float, as_int
from .container import TensorContainer, TensorEntry
from .pipeline import decompress_to_dense, stats_to_container

RMS_EPS = 1e-6
ZIPF_EXPONENT = 1.1


@dataclass(frozen=True)
class ToyModelSpec:
    vocab: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    seed: int = 0
    gated_mlp: bool = True
    # >0 tilts attention weights towards a decaying spectrum (column j scaled
    # by exp(-decay * j / d_in)); 0 gives plain Gaussian weights
    attn_spectrum_decay: float = 0.0

    def __post_init__(self):
        for key in ("vocab", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.attn_spectrum_decay < 0:
            raise ValueError("attn_spectrum_decay must be >= 0")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ToyModelSpec":
        conv = {"vocab": as_int, "d_model": as_int, "n_layers": as_int, "n_heads": as_int,
                "d_ff": as_int, "seed": as_int, "gated_mlp": as_bool,
                "attn_spectrum_decay": as_float}
        args = {}
        for key, value in kv.items():
            short = key[4:] if key.startswith("toy.") else key
            if short not in conv:
                raise ConfigError(f"unknown toy model key {key!r}")
            args[short] = conv[short](key, value)
        try:
            return cls(**args)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def metadata(self) -> dict[str, str]:
        return {f"toy.{k}": str(v) for k, v in asdict(self).items()}

    def parameter_count(self) -> int:
        d, ff = self.d_model, self.d_ff
        mlp = (3 if self.gated_mlp else 2) * d * ff
        return self.n_layers * (4 * d * d + mlp + 2 * d) + 2 * self.vocab * d + d


@dataclass(frozen=True)
class EvalResult:
    pseudo_perplexity: float
    baseline_perplexity: float
    divergence: float
    tokens: int


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def _normals(seed: int, index: int, count: int) -> np.ndarray:
    """``count`` standard normals from a Philox stream keyed on (seed, index)."""
    bitgen = np.random.Philox(key=np.array([seed, index], dtype=np.uint64))
    u = np.random.Generator(bitgen).random(2 * ((count + 1) // 2))
    u1 = 1.0 - u[0::2]          # (0, 1], keeps log finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(u.size)
    z[0::2] = radius * np.cos(2.0 * np.pi * u2)
    z[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return z[:count]


def build_toy_model(spec: ToyModelSpec) -> TensorContainer:
    d, ff, V = spec.d_model, spec.d_ff, spec.vocab
    arrays: dict[str, np.ndarray] = {}
    counter = 0

    def gaussian(rows, cols, scale):
        nonlocal counter
        counter += 1
        return _normals(spec.seed, counter, rows * cols).reshape(rows, cols) * scale

    arrays["model.embed_tokens.weight"] = gaussian(V, d, 1.0)
    decay = np.exp(-spec.attn_spectrum_decay * np.arange(d) / d)
    decay *= np.sqrt(d / np.sum(decay**2))
    for l in range(spec.n_layers):
        p = f"model.layers.{l}"
        arrays[f"{p}.input_layernorm.weight"] = np.ones(d)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            arrays[f"{p}.self_attn.{proj}.weight"] = gaussian(d, d, 1.0 / np.sqrt(d)) * decay
        arrays[f"{p}.post_attention_layernorm.weight"] = np.ones(d)
        if spec.gated_mlp:
            arrays[f"{p}.mlp.gate_proj.weight"] = gaussian(ff, d, 1.0 / np.sqrt(d))
        arrays[f"{p}.mlp.up_proj.weight"] = gaussian(ff, d, 1.0 / np.sqrt(d))
        arrays[f"{p}.mlp.down_proj.weight"] = gaussian(d, ff, 1.0 / np.sqrt(ff))
    arrays["model.norm.weight"] = np.ones(d)
    arrays["lm_head.weight"] = gaussian(V, d, 1.0 / np.sqrt(d))
    entries = {k: TensorEntry.from_array(v, "F32") for k, v in arrays.items()}
    return TensorContainer(entries, spec.metadata())


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _rmsnorm(x, w):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) * w


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _silu(x):
    return x / (1.0 + np.exp(-x))


class _Weights:
    def __init__(self, model: TensorContainer):
        self.model = model
        self.cache: dict[str, np.ndarray] = {}

    def __call__(self, name):
        if name not in self.cache:
            self.cache[name] = self.model.array(name).astype(np.float32)
        return self.cache[name]

    def has(self, name):
        return name in self.model.entries

    def linear(self, x, name):
        y = x @ self(f"{name}.weight").T
        if self.has(f"{name}.bias"):
            y = y + self(f"{name}.bias")
        return y


def _model_meta(model: TensorContainer) -> tuple[int, int]:
    try:
        return int(model.metadata["toy.n_layers"]), int(model.metadata["toy.n_heads"])
    except (KeyError, ValueError):
        raise ValueError("model metadata lacks toy.n_layers / toy.n_heads") from None


def forward(model: TensorContainer, ids, weights: _Weights | None = None):
    """Causal pre-norm decoder forward in float32.

    Returns ``(logits [T, V], records)`` where ``records`` maps each MLP
    block prefix to its hidden activations ``[T, N]`` (the input of down_proj).
    Accepts dense containers, including pruned ones with reduced MLP widths.
    """
    if any(k.startswith(("quant.", "svd.", "lora.")) for k in model.metadata):
        raise ValueError("forward needs a dense model; call decompress_to_dense first")
    W = weights or _Weights(model)
    n_layers, n_heads = _model_meta(model)
    ids = np.asarray(ids, dtype=np.int64)
    emb = W("model.embed_tokens.weight")
    if ids.ndim != 1 or ids.size < 2:
        raise ValueError("need a 1-D sequence of at least 2 token ids")
    if ids.min() < 0 or ids.max() >= emb.shape[0]:
        raise ValueError("token id out of range")

    T = ids.size
    x = emb[ids]
    d = x.shape[1]
    dh = d // n_heads
    mask = np.triu(np.full((T, T), -np.inf, dtype=np.float32), k=1)
    records = {}
    for l in range(n_layers):
        p = f"model.layers.{l}"
        h = _rmsnorm(x, W(f"{p}.input_layernorm.weight"))
        q = W.linear(h, f"{p}.self_attn.q_proj").reshape(T, n_heads, dh).transpose(1, 0, 2)
        k = W.linear(h, f"{p}.self_attn.k_proj").reshape(T, n_heads, dh).transpose(1, 0, 2)
        v = W.linear(h, f"{p}.self_attn.v_proj").reshape(T, n_heads, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(dh)) + mask
        att = (_softmax(scores) @ v).transpose(1, 0, 2).reshape(T, d)
        x = x + W.linear(att, f"{p}.self_attn.o_proj")

        h = _rmsnorm(x, W(f"{p}.post_attention_layernorm.weight"))
        if W.has(f"{p}.mlp.gate_proj.weight"):
            hidden = _silu(W.linear(h, f"{p}.mlp.gate_proj")) * W.linear(h, f"{p}.mlp.up_proj")
        else:
            hidden = np.maximum(W.linear(h, f"{p}.mlp.up_proj"), 0.0)
        records[f"{p}.mlp"] = hidden
        x = x + W.linear(hidden, f"{p}.mlp.down_proj")
    x = _rmsnorm(x, W("model.norm.weight"))
    logits = x @ W("lm_head.weight").T
    return logits.astype(np.float32), records


# ---------------------------------------------------------------------------
# data, stats, evaluation
# ---------------------------------------------------------------------------

def token_batches(vocab: int, n_seqs: int = 8, seq_len: int = 128, seed: int = 0) -> list[np.ndarray]:
    """Zipf-skewed synthetic token sequences (exponent 1.1)."""
    probs = 1.0 / np.arange(1, vocab + 1) ** ZIPF_EXPONENT
    probs /= probs.sum()
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x70CE5], dtype=np.uint64)))
    return [rng.choice(vocab, size=seq_len, p=probs) for _ in range(n_seqs)]


def _vocab(model: TensorContainer) -> int:
    return model["model.embed_tokens.weight"].shape[0]


def collect_activation_stats(model: TensorContainer, batches, p: int = 1) -> prune_mod.ActivationStats:
    W = _Weights(model)
    per_layer: dict[str, list] = {}
    for ids in batches:
        _, records = forward(model, ids, W)
        for name, hidden in records.items():
            per_layer.setdefault(name, []).append(hidden.T.astype(np.float64))
    mags = {name: prune_mod.neuron_magnitudes(np.stack(acts), p)
            for name, acts in per_layer.items()}
    return prune_mod.ActivationStats(mags, p=p, samples=len(batches))


def collect_stats(model: TensorContainer, batches, p: int = 1) -> TensorContainer:
    """Calibration stats as a container (``stats.<layer>.magnitude`` entries)."""
    return stats_to_container(collect_activation_stats(model, batches, p))


def _log_softmax(z):
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_dense(model: TensorContainer) -> TensorContainer:
    if any(k.startswith(("quant.", "svd.", "lora.")) for k in model.metadata):
        return decompress_to_dense(model)
    return model


def next_token_nll(logits, ids) -> np.ndarray:
    logp = _log_softmax(np.asarray(logits)[:-1])
    targets = np.asarray(ids)[1:]
    return -logp[np.arange(targets.size), targets]


def kl_divergence(base_logits, other_logits) -> np.ndarray:
    """Per-position KL(softmax(base) || softmax(other))."""
    lp = _log_softmax(base_logits)
    lq = _log_softmax(other_logits)
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=-1), 0.0)


def evaluate(baseline: TensorContainer, compressed: TensorContainer, batches) -> EvalResult:
    baseline = _as_dense(baseline)
    compressed = _as_dense(compressed)
    Wb, Wc = _Weights(baseline), _Weights(compressed)
    nll_b, nll_c, kls = [], [], []
    for ids in batches:
        lb, _ = forward(baseline, ids, Wb)
        lc, _ = forward(compressed, ids, Wc)
        nll_b.append(next_token_nll(lb, ids))
        nll_c.append(next_token_nll(lc, ids))
        kls.append(kl_divergence(lb, lc))
    nll_b = np.concatenate(nll_b)
    nll_c = np.concatenate(nll_c)
    return EvalResult(
        pseudo_perplexity=float(np.exp(nll_c.mean())),
        baseline_perplexity=float(np.exp(nll_b.mean())),
        divergence=float(np.concatenate(kls).mean()),
        tokens=int(nll_c.size),
    )
