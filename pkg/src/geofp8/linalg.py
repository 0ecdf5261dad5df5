"""Dense float64 linear algebra and sampling primitives.

Matrices and vectors are plain read-only ``numpy`` arrays. Everything here
works in 64-bit reals; FP8 only appears in :mod:`geofp8.fp8`.
"""
from __future__ import annotations

import numpy as np

ORACLE_MAX_ITER = 10_000
ORACLE_TOL = 1e-10


class DimensionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine hits its cap; carries the best estimate."""

    def __init__(self, message: str, estimate: float, iterations: int):
        super().__init__(message)
        self.estimate = estimate
        self.iterations = iterations


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and freeze a 2-D float64 array.

    A flat sequence is accepted together with ``rows``/``cols`` and is read
    row-major.
    """
    a = np.array(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise DimensionError("rows and cols must be given together")
        if a.size != rows * cols:
            raise DimensionError(f"data length {a.size} != {rows}x{cols}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    a.setflags(write=False)
    return a


def as_vector(data) -> np.ndarray:
    v = np.array(data, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    v.setflags(write=False)
    return v


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams."""
    return np.random.default_rng(seed)


def matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: A is {A.shape}, x has length {x.shape[0]}")
    return A @ x


def matvec_t(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Compute ``A.T @ y`` without forming the transpose."""
    if A.shape[0] != y.shape[0]:
        raise DimensionError(f"matvec_t: A is {A.shape}, y has length {y.shape[0]}")
    return y @ A


def spectral_norm_oracle(A: np.ndarray, tol: float = ORACLE_TOL,
                         max_iter: int = ORACLE_MAX_ITER) -> float:
    """Largest singular value via the explicit Gram matrix.

    Deliberately expensive reference: forms ``A^T A`` or ``A A^T`` (whichever
    is smaller) and runs power iteration on it with repeated squaring, so the
    eigen-gap is raised to ``2**k`` after ``k`` rounds and nearly-degenerate
    spectra still converge. The eigenvalue is read off as a Rayleigh quotient
    of the *original* Gram matrix.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if A.size == 0:
        return 0.0
    G = A.T @ A if A.shape[1] <= A.shape[0] else A @ A.T
    G = 0.5 * (G + G.T)
    scale = np.abs(G).max()
    if scale == 0.0:
        return 0.0

    P = G / scale
    prev = None
    lam = 0.0
    for it in range(1, max_iter + 1):
        col = np.argmax(np.einsum("ij,ij->j", P, P))
        v = P[:, col]
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # squaring underflowed; the previous estimate is as good as it gets
            break
        v = v / nv
        lam = float(v @ G @ v)
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            return float(np.sqrt(max(lam, 0.0)))
        prev = lam
        P = P @ P
        P /= np.abs(P).max()
    raise ConvergenceError(
        f"Gram eigen-iteration did not reach tol={tol} in {max_iter} rounds",
        estimate=float(np.sqrt(max(lam, 0.0))), iterations=max_iter,
    )


def sample_sphere(rng: np.random.Generator, d: int, size: int | None = None) -> np.ndarray:
    """Uniform draw(s) from the unit sphere in ``R^d`` (normalized Gaussians).

    With ``size`` given, returns a ``(size, d)`` array of independent rows.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    n = 1 if size is None else size
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1)
    # the all-zero draw has probability zero, but resample rather than divide by 0
    while np.any(norms == 0.0):
        bad = norms == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(g, axis=1)
    u = g / norms[:, None]
    return u[0] if size is None else u


def random_orthonormal(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    """``d x k`` matrix with Haar-distributed orthonormal columns."""
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))
