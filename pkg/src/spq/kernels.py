"""Hot numeric kernels.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The active implementation is picked once at import time:

    SPQ_BACKEND=numpy   force the numpy path
    SPQ_BACKEND=numba   require numba (ImportError if missing)
    unset / auto        numba when importable, numpy otherwise

Both variants stay importable (``*_numpy`` / ``*_numba``) so tests and the
benchmark can compare them directly.
"""
import math
import os

import numpy as np

_requested = os.environ.get("SPQ_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numpy", "numba"):
    raise ValueError(f"SPQ_BACKEND must be auto, numpy or numba, got {_requested!r}")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on the environment
    numba = None
    HAVE_NUMBA = False

if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("SPQ_BACKEND=numba but numba is not installed")

BACKEND = "numba" if (HAVE_NUMBA and _requested != "numpy") else "numpy"


# ---------------------------------------------------------------------------
# One-sided (Hestenes) Jacobi sweeps
# ---------------------------------------------------------------------------

def _round_robin_rounds(n):
    """Pairings for a round-robin tournament over ``n`` columns.

    Every unordered pair appears exactly once across the returned rounds and
    the pairs inside one round are disjoint, so they can be rotated together.
    """
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        left = []
        right = []
        for a, b in zip(players[: size // 2], reversed(players[size // 2:])):
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_sweeps_numpy(G, V, tol, max_sweeps):
    """Orthogonalise the columns of ``G`` in place, accumulating rotations in ``V``.

    Pairs are processed in round-robin order with all disjoint pairs of a
    round rotated at once. Returns the number of sweeps performed.
    """
    n = G.shape[1]
    if n < 2:
        return 0
    rounds = _round_robin_rounds(n)
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for I, J in rounds:
            gi = G[:, I]
            gj = G[:, J]
            alpha = np.einsum("ij,ij->j", gi, gi)
            beta = np.einsum("ij,ij->j", gj, gj)
            gamma = np.einsum("ij,ij->j", gi, gj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            I = I[active]
            J = J[active]
            gi = gi[:, active]
            gj = gj[:, active]
            alpha = alpha[active]
            beta = beta[active]
            gamma = gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            G[:, I] = c * gi - s * gj
            G[:, J] = s * gi + c * gj
            vi = V[:, I]
            vj = V[:, J]
            V[:, I] = c * vi - s * vj
            V[:, J] = s * vi + c * vj
        if not rotated:
            break
    return sweeps


def _jacobi_sweeps_py(G, V, tol, max_sweeps):
    m, n = G.shape
    nv = V.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    a = G[r, i]
                    b = G[r, j]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if not abs(gamma) > tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0.0 else -1.0
                t = sign / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    a = G[r, i]
                    b = G[r, j]
                    G[r, i] = c * a - s * b
                    G[r, j] = s * a + c * b
                for r in range(nv):
                    a = V[r, i]
                    b = V[r, j]
                    V[r, i] = c * a - s * b
                    V[r, j] = s * a + c * b
        if not rotated:
            break
    return sweeps


# ---------------------------------------------------------------------------
# Symmetric round-half-away-from-zero quantization
# ---------------------------------------------------------------------------

def quantize_rows_numpy(W, row_scales, qmax):
    """``clip(round_half_away(W[i, j] / row_scales[i]), -qmax, qmax)`` as int32."""
    x = W / row_scales[:, None]
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -qmax, qmax).astype(np.int32)


def _quantize_rows_py(W, row_scales, qmax):
    m, n = W.shape
    out = np.empty((m, n), dtype=np.int32)
    for i in range(m):
        s = row_scales[i]
        for j in range(n):
            x = W[i, j] / s
            q = math.floor(abs(x) + 0.5)
            if q > qmax:
                q = qmax
            out[i, j] = int(q) if x >= 0.0 else -int(q)
    return out


if HAVE_NUMBA:
    jacobi_sweeps_numba = numba.njit(cache=True, nogil=True)(_jacobi_sweeps_py)
    quantize_rows_numba = numba.njit(cache=True, nogil=True)(_quantize_rows_py)
else:  # pragma: no cover
    jacobi_sweeps_numba = None
    quantize_rows_numba = None

if BACKEND == "numba":
    jacobi_sweeps = jacobi_sweeps_numba
    quantize_rows = quantize_rows_numba
else:
    jacobi_sweeps = jacobi_sweeps_numpy
    quantize_rows = quantize_rows_numpy
