"""Activation-based structured neuron pruning for MLP blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STRATEGIES = ("linear", "log", "sigmoid")


@dataclass(frozen=True)
class PruneConfig:
    strategy: str = "log"
    r_min: float = 0.0
    r_max: float = 0.30
    eps_div: float = 1e-8
    delta_log: float = 1e-6
    sigmoid_k: float = 10.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown pruning strategy {self.strategy!r}")
        if not (0.0 <= self.r_min <= self.r_max <= 1.0):
            raise ValueError(f"need 0 <= r_min <= r_max <= 1, got {self.r_min}, {self.r_max}")
        if self.eps_div <= 0 or self.delta_log <= 0 or self.sigmoid_k <= 0:
            raise ValueError("eps_div, delta_log and sigmoid_k must be positive")


@dataclass
class ActivationStats:
    """Per-layer neuron magnitudes from a calibration run."""

    magnitudes: dict[str, np.ndarray]
    p: int = 1
    samples: int = 0

    def layer_means(self) -> dict[str, float]:
        return {name: layer_mean(m) for name, m in self.magnitudes.items()}


@dataclass
class LayerPlan:
    ratio: float
    pruned_indices: np.ndarray
    kept_indices: np.ndarray


@dataclass
class PrunePlan:
    layers: dict[str, LayerPlan] = field(default_factory=dict)
    degenerate: bool = False    # every layer mean equal (incl. single layer)


def neuron_magnitudes(activations, p: int = 1) -> np.ndarray:
    """Mean over samples of the per-sample L1 (mean |h|) or L2 (mean h^2) activation.

    ``activations`` has shape ``(samples, ..., d)``; the last axis holds the d
    values of one neuron for one sample and is averaged first, then samples.
    """
    h = np.asarray(activations, dtype=np.float64)
    if h.ndim < 2 or h.shape[0] == 0:
        raise ValueError("need at least one sample with a trailing per-neuron axis")
    if h.shape[-1] == 0:
        raise ValueError("per-neuron activation dimension must be >= 1")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite activations")
    if p == 1:
        per_sample = np.abs(h).mean(axis=-1)
    elif p == 2:
        per_sample = np.square(h).mean(axis=-1)
    else:
        raise ValueError(f"p must be 1 or 2, got {p}")
    return per_sample.mean(axis=0)


def layer_mean(magnitudes) -> float:
    m = np.asarray(magnitudes, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty magnitude vector")
    return float(m.mean())


def _minmax(values, eps_div):
    return (values - values.min()) / (values.max() - values.min() + eps_div)


def pruning_ratios(layer_means, config: PruneConfig) -> np.ndarray:
    """Map per-layer mean activations to per-layer pruning ratios.

    Less active layers receive ratios closer to ``r_max``.
    """
    a = np.asarray(layer_means, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("need at least one layer mean")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite layer means")
    if np.any(a < 0):
        raise ValueError("layer means must be non-negative")
    span = config.r_max - config.r_min

    if config.strategy == "linear":
        n = _minmax(a, config.eps_div)
        r = config.r_min + (1.0 - n) * span
    elif config.strategy == "log":
        ell = np.log(a + config.delta_log)
        n = (ell.max() - ell) / (ell.max() - ell.min() + config.eps_div)
        r = config.r_min + n * span
    else:
        # sigmoid reuses the linear min-max normalisation
        n = _minmax(a, config.eps_div)
        s = 1.0 / (1.0 + np.exp(config.sigmoid_k * (n - 0.5)))
        r = config.r_min + s * span
    return np.clip(r, config.r_min, config.r_max)


def prune_count(ratio: float, n: int) -> int:
    # tiny slack so products like 0.15 * 20 = 2.9999999999999996 floor to 3
    return min(n, max(0, math.floor(ratio * n + 1e-9)))


def select_pruned(magnitudes, ratio: float):
    """Indices of the ``floor(ratio * N)`` weakest neurons and of the rest.

    Ties prune the lower index first; both index arrays are sorted.
    """
    m = np.asarray(magnitudes, dtype=np.float64)
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    count = prune_count(ratio, m.size)
    order = np.argsort(m, kind="stable")
    pruned = np.sort(order[:count])
    kept = np.sort(order[count:])
    return pruned, kept


def plan_pruning(stats: ActivationStats, config: PruneConfig) -> PrunePlan:
    names = list(stats.magnitudes)
    means = np.array([layer_mean(stats.magnitudes[k]) for k in names])
    ratios = pruning_ratios(means, config)
    plan = PrunePlan(degenerate=bool(means.max() == means.min()))
    for name, r in zip(names, ratios):
        pruned, kept = select_pruned(stats.magnitudes[name], float(r))
        plan.layers[name] = LayerPlan(float(r), pruned, kept)
    return plan


def apply_structured_prune(weights: dict, kept_indices) -> dict:
    """Keep only ``kept_indices`` hidden neurons of an MLP block.

    ``weights`` holds ``up`` (N x d_in), optional ``gate`` (N x d_in), ``down``
    (d_out x N) and optional ``up_bias`` / ``gate_bias`` (N) and ``down_bias``
    (d_out, untouched). Returns a new dict with the same keys.
    """
    kept = np.asarray(kept_indices, dtype=np.intp)
    if kept.size == 0:
        raise ValueError("kept index set is empty")
    up = np.asarray(weights["up"])
    down = np.asarray(weights["down"])
    n = up.shape[0]
    if down.ndim != 2 or down.shape[1] != n:
        raise ValueError(f"down {down.shape} does not match hidden size {n}")
    for key in ("gate", "up_bias", "gate_bias"):
        if weights.get(key) is not None and np.shape(weights[key])[0] != n:
            raise ValueError(f"{key} {np.shape(weights[key])} does not match hidden size {n}")
    if kept.min() < 0 or kept.max() >= n or np.unique(kept).size != kept.size:
        raise ValueError("kept indices out of range or repeated")

    out = dict(weights)
    out["up"] = up[kept]
    out["down"] = down[:, kept]
    for key in ("gate", "up_bias", "gate_bias"):
        if weights.get(key) is not None:
            out[key] = np.asarray(weights[key])[kept]
    return out
