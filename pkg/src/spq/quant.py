"""Symmetric linear weight quantization with tensor / channel / hybrid scale selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

MODES = ("per_tensor", "per_channel", "LNH", "PBH", "MSH")
TENSOR = "tensor"
CHANNEL = "channel"


@dataclass(frozen=True)
class QuantPolicy:
    mode: str = "LNH"
    bits: int = 8
    pbh_alpha: float = 25.0   # percent of layers promoted to per-channel
    msh_k: float = 1.0        # std multiplier for the outlier threshold

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown quant mode {self.mode!r}; expected one of {MODES}")
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if not 0.0 < self.pbh_alpha <= 100.0:
            raise ValueError(f"pbh_alpha must be in (0, 100], got {self.pbh_alpha}")
        if not self.msh_k > 0.0:
            raise ValueError(f"msh_k must be positive, got {self.msh_k}")

    @property
    def needs_sensitivity(self) -> bool:
        return self.mode in ("PBH", "MSH")


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray    # int32 holding b-bit signed codes
    scales: np.ndarray    # shape (1,) or (rows,)
    bits: int
    granularity: str

    @property
    def storage_dtype(self) -> str:
        return "I8" if self.bits <= 8 else "I32"


def qmax(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def _as_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        return W[None, :]
    if W.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got shape {W.shape}")
    return W


def scale_per_tensor(W, bits: int = 8) -> float:
    peak = float(np.max(np.abs(W))) if np.size(W) else 0.0
    return peak / qmax(bits) if peak > 0.0 else 1.0


def scale_per_channel(W, bits: int = 8) -> np.ndarray:
    peak = np.max(np.abs(_as_matrix(W)), axis=1)
    return np.where(peak > 0.0, peak / qmax(bits), 1.0)


def compute_scales(W, granularity: str, bits: int = 8) -> np.ndarray:
    if granularity == TENSOR:
        return np.array([scale_per_tensor(W, bits)])
    if granularity == CHANNEL:
        return scale_per_channel(W, bits)
    raise ValueError(f"unknown granularity {granularity!r}")


def quantize(W, scales, bits: int = 8, quantize_fn=None) -> QuantizedTensor:
    """Round-half-away-from-zero of ``W / s`` clipped to ``[-qmax, qmax]``.

    ``scales`` of length 1 is per-tensor; length ``rows`` is per-channel.
    """
    W2 = _as_matrix(W)
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if scales.size == 1:
        granularity = TENSOR
        row_scales = np.full(W2.shape[0], scales[0])
    elif scales.size == W2.shape[0]:
        granularity = CHANNEL
        row_scales = scales
    else:
        raise ValueError(f"{scales.size} scales for a matrix with {W2.shape[0]} rows")
    if np.any(row_scales <= 0):
        raise ValueError("scales must be positive")
    fn = quantize_fn or kernels.quantize_rows
    values = fn(np.ascontiguousarray(W2), np.ascontiguousarray(row_scales), qmax(bits))
    return QuantizedTensor(values.reshape(np.shape(W)), scales.copy(), bits, granularity)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    v = _as_matrix(qt.values).astype(np.float64)
    s = qt.scales if qt.granularity == CHANNEL else np.full(v.shape[0], qt.scales[0])
    return (v * s[:, None]).reshape(np.shape(qt.values))


def quantize_with(W, granularity: str, bits: int = 8) -> QuantizedTensor:
    return quantize(W, compute_scales(W, granularity, bits), bits)


def layer_sensitivity(W, bits: int = 8) -> float:
    """Relative Frobenius error of a per-tensor round trip."""
    W = np.asarray(W, dtype=np.float64)
    err = W - dequantize(quantize_with(W, TENSOR, bits))
    return float(np.linalg.norm(err) / max(float(np.linalg.norm(W)), 1e-12))


@dataclass(frozen=True)
class LayerInfo:
    name: str
    layer_class: str          # "attention", "mlp", "other"
    sensitivity: float | None = None


def select_granularity(layers, policy: QuantPolicy) -> tuple[dict[str, str], dict]:
    """Choose per-tensor or per-channel scales for each layer.

    Returns ``(choice, details)``; ``details`` carries the PBH/MSH threshold.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("empty layer list")
    mode = policy.mode
    details: dict = {"mode": mode}
    if mode == "per_tensor":
        return {l.name: TENSOR for l in layers}, details
    if mode == "per_channel":
        return {l.name: CHANNEL for l in layers}, details
    if mode == "LNH":
        return {l.name: CHANNEL if l.layer_class == "attention" else TENSOR for l in layers}, details

    if any(l.sensitivity is None for l in layers):
        raise ValueError(f"{mode} needs a sensitivity value for every layer")
    q = np.array([l.sensitivity for l in layers], dtype=np.float64)
    if mode == "PBH":
        count = math.ceil(policy.pbh_alpha * len(layers) / 100.0 - 1e-9)
        ranked = sorted(range(len(layers)), key=lambda i: (-q[i], layers[i].name))
        chosen = set(ranked[:count])
        details["count"] = count
        details["threshold"] = float(q[ranked[count - 1]]) if count else None
        return {l.name: CHANNEL if i in chosen else TENSOR for i, l in enumerate(layers)}, details

    mu = float(q.mean())
    sigma = float(q.std())   # population std over all layers
    threshold = mu + policy.msh_k * sigma
    details.update(mean=mu, std=sigma, threshold=threshold)
    return {l.name: CHANNEL if q[i] >= threshold else TENSOR for i, l in enumerate(layers)}, details


def quantized_bytes(rows: int, cols: int, granularity: str, bits: int = 8) -> int:
    per_value = 1 if bits <= 8 else 4
    return rows * cols * per_value + 4 * (rows if granularity == CHANNEL else 1)
