"""Variance-retained truncated SVD for attention projections."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray                 # m x m
    singular_values: np.ndarray   # min(m, n), non-increasing
    V: np.ndarray                 # n x n
    sweeps: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]


@dataclass(frozen=True)
class SvdFactors:
    A: np.ndarray   # m x k, carries the singular values
    B: np.ndarray   # k x n
    retained_rank: int
    variance_threshold: float | None
    rank_ratio: float

    def reconstruct(self) -> np.ndarray:
        return self.A @ self.B

    def metadata_value(self) -> str:
        eps = "none" if self.variance_threshold is None else repr(float(self.variance_threshold))
        return f"k={self.retained_rank};eps={eps};r={self.rank_ratio!r}"


def _complete_basis(Q: np.ndarray, m: int) -> np.ndarray:
    """Extend the orthonormal columns of ``Q`` (m x r) to an m x m orthogonal matrix."""
    r = Q.shape[1]
    if r == m:
        return Q
    full, _ = np.linalg.qr(np.hstack([Q, np.eye(m)]), mode="complete")
    return np.hstack([Q, full[:, r:m]])


def compute_svd(W, *, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS,
                sweeps_fn=None) -> SvdResult:
    """Full SVD ``W = U diag(s) V^T`` via one-sided Jacobi in float64.

    ``sweeps_fn`` overrides the Jacobi kernel (see :mod:`spq.kernels`).
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or min(W.shape) < 1:
        raise ValueError(f"expected a non-empty matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("non-finite input to compute_svd")
    sweeps_fn = sweeps_fn or kernels.jacobi_sweeps

    m, n = W.shape
    transposed = m < n
    G = np.array(W.T if transposed else W, dtype=np.float64, order="C")
    rows, cols = G.shape
    Vg = np.eye(cols)
    sweeps = sweeps_fn(G, Vg, tol, max_sweeps)
    if sweeps >= max_sweeps:
        log.warning("Jacobi SVD hit the %d-sweep cap on a %dx%d matrix", max_sweeps, m, n)

    sigma = np.sqrt(np.einsum("ij,ij->j", G, G))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    G = G[:, order]
    Vg = Vg[:, order]

    # columns with negligible norm have no reliable direction; rebuild them
    cutoff = sigma[0] * max(rows, cols) * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0
    keep = int(np.count_nonzero(sigma > cutoff))
    Ug = _complete_basis(G[:, :keep] / sigma[:keep], rows)

    if transposed:
        U, V = Vg, Ug
    else:
        U, V = Ug, Vg
    return SvdResult(U=U, singular_values=sigma, V=V, sweeps=int(sweeps))


def retained_rank(singular_values, eps: float) -> int:
    """Smallest k whose leading squared singular values reach an ``eps`` share of the total."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular_values must be a non-empty vector")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise ValueError("singular_values must be non-negative and non-increasing")
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    energy = np.cumsum(s * s)
    total = energy[-1]
    if total == 0.0:
        raise ValueError("degenerate input: all singular values are zero")
    k = int(np.argmax(energy / total >= eps)) + 1
    return max(k, 1)


def truncate(result: SvdResult, k: int, eps: float | None = None) -> SvdFactors:
    m, n = result.shape
    p = min(m, n)
    if not 1 <= k <= p:
        raise ValueError(f"rank {k} outside [1, {p}]")
    A = result.U[:, :k] * result.singular_values[:k]
    B = result.V[:, :k].T.copy()
    return SvdFactors(A=A, B=B, retained_rank=k, variance_threshold=eps, rank_ratio=k / p)


def svd_memory_gain(m: int, n: int, k: int) -> int:
    """Bytes saved (F32) by storing m x k and k x n factors instead of m x n."""
    return 4 * (m * n - k * (m + n))


def factorize(W, eps: float, **kwargs) -> SvdFactors:
    """SVD + variance-retained truncation in one call."""
    result = compute_svd(W, **kwargs)
    return truncate(result, retained_rank(result.singular_values, eps), eps)
