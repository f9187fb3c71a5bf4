"""Low-rank adapters and weight-reconstruction recovery.

The adapter perturbs a frozen weight as ``W + (alpha / r) B A``. Recovery fits
A and B by gradient descent on ``||W_c + (alpha/r) B A - W_orig||_F^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_HALVINGS = 20


class LoraDivergenceError(RuntimeError):
    pass


@dataclass
class LoraAdapter:
    A: np.ndarray   # r x d_in
    B: np.ndarray   # d_out x r
    alpha: float
    losses: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ValueError(f"incompatible adapter shapes A{self.A.shape} B{self.B.shape}")
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    def metadata_value(self) -> str:
        return f"r={self.rank};alpha={self.alpha!r}"


def init_adapter(d_out: int, d_in: int, rank: int, alpha: float, seed: int = 0) -> LoraAdapter:
    if not 1 <= rank <= min(d_in, d_out):
        raise ValueError(f"rank {rank} must lie in [1, min({d_in}, {d_out})]")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((rank, d_in)) / np.sqrt(d_in)
    return LoraAdapter(A, np.zeros((d_out, rank)), float(alpha))


def lora_forward(W_c, adapter: LoraAdapter, x) -> np.ndarray:
    W_c = np.asarray(W_c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W_c.shape != (adapter.B.shape[0], adapter.A.shape[1]) or x.shape[0] != W_c.shape[1]:
        raise ValueError(f"shape mismatch: W{W_c.shape} A{adapter.A.shape} "
                         f"B{adapter.B.shape} x{x.shape}")
    return W_c @ x + adapter.scaling * (adapter.B @ (adapter.A @ x))


def _residual(W_orig, W_c, adapter):
    return np.asarray(W_c, dtype=np.float64) + adapter.delta() - np.asarray(W_orig, dtype=np.float64)


def recon_loss(W_orig, W_c, adapter: LoraAdapter) -> float:
    R = _residual(W_orig, W_c, adapter)
    return float(np.sum(R * R))


def recon_grad(W_orig, W_c, adapter: LoraAdapter):
    """Analytic ``(dL/dA, dL/dB)`` of :func:`recon_loss`."""
    R = _residual(W_orig, W_c, adapter)
    c = 2.0 * adapter.scaling
    return c * (adapter.B.T @ R), c * (R @ adapter.A.T)


def lora_recover(W_orig, W_c, rank: int = 8, alpha: float = 16.0, steps: int = 200,
                 learning_rate: float = 0.05, seed: int = 0) -> LoraAdapter:
    """Fit an adapter so that ``W_c + delta`` approaches ``W_orig``.

    Plain gradient descent; a step that raises the loss is retried with half
    the learning rate (up to 20 times, then LoraDivergenceError). The step size
    carried forward is the last accepted one. ``adapter.losses`` records the
    loss before the first step and after every accepted step.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    W_orig = np.asarray(W_orig, dtype=np.float64)
    W_c = np.asarray(W_c, dtype=np.float64)
    if W_orig.shape != W_c.shape or W_c.ndim != 2:
        raise ValueError(f"shape mismatch {W_orig.shape} vs {W_c.shape}")
    d_out, d_in = W_c.shape
    adapter = init_adapter(d_out, d_in, min(rank, d_in, d_out), alpha, seed)
    loss = recon_loss(W_orig, W_c, adapter)
    adapter.losses.append(loss)
    lr = learning_rate
    for _ in range(steps):
        if loss == 0.0:
            break
        gA, gB = recon_grad(W_orig, W_c, adapter)
        for _ in range(MAX_HALVINGS + 1):
            trial = LoraAdapter(adapter.A - lr * gA, adapter.B - lr * gB, adapter.alpha)
            trial_loss = recon_loss(W_orig, W_c, trial)
            if trial_loss <= loss:
                break
            lr *= 0.5
        else:
            raise LoraDivergenceError(f"loss still increasing after {MAX_HALVINGS} halvings")
        adapter.A, adapter.B, loss = trial.A, trial.B, trial_loss
        adapter.losses.append(loss)
    return adapter


def merge_adapter(W_c, adapter: LoraAdapter) -> np.ndarray:
    """Dense ``W_c + (alpha/r) B A``; merging twice applies the update twice."""
    return np.asarray(W_c, dtype=np.float64) + adapter.delta()
