"""Implicit power iteration for the query-key interaction norm.

The interaction matrix ``M = Wq @ expand_kv(Wk).T`` is never formed: each
step only multiplies by ``Wq``, ``Wk`` and their transposes, with GQA handled
by replicating / summing the small ``n_kv * d_h`` intermediate vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    ConvergenceError,
    DimensionError,
    as_matrix,
    matvec,
    matvec_t,
    sample_sphere,
)

CONVERGE_TOL = 1e-10
CONVERGE_MAX_ITER = 10_000
COLD_START_ITERS = 5


@dataclass(frozen=True)
class AttentionWeights:
    """Query/key projections of one attention layer.

    ``Wq`` is ``d x (n_q*d_h)`` and ``Wk`` is ``d x (n_kv*d_h)``; heads are
    contiguous column blocks of width ``d_h``.
    """

    Wq: np.ndarray
    Wk: np.ndarray
    d_h: int
    n_q: int
    n_kv: int

    def __post_init__(self):
        object.__setattr__(self, "Wq", as_matrix(self.Wq))
        object.__setattr__(self, "Wk", as_matrix(self.Wk))
        if min(self.d_h, self.n_q, self.n_kv) < 1:
            raise ValueError("d_h, n_q and n_kv must be positive")
        if self.n_q % self.n_kv:
            raise ValueError(f"n_q={self.n_q} is not a multiple of n_kv={self.n_kv}")
        if self.Wq.shape[0] != self.Wk.shape[0]:
            raise DimensionError("Wq and Wk must have the same number of rows")
        if self.Wq.shape[1] != self.n_q * self.d_h:
            raise DimensionError(f"Wq has {self.Wq.shape[1]} cols, expected {self.n_q * self.d_h}")
        if self.Wk.shape[1] != self.n_kv * self.d_h:
            raise DimensionError(f"Wk has {self.Wk.shape[1]} cols, expected {self.n_kv * self.d_h}")

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    @property
    def group_size(self) -> int:
        return self.n_q // self.n_kv

    def scaled(self, s: float) -> "AttentionWeights":
        return AttentionWeights(s * self.Wq, s * self.Wk, self.d_h, self.n_q, self.n_kv)

    def head(self, h: int) -> "AttentionWeights":
        """Single-head weights for query head ``h`` and the kv head it reads."""
        if not 0 <= h < self.n_q:
            raise IndexError(f"head {h} out of range for n_q={self.n_q}")
        kv = h // self.group_size
        dh = self.d_h
        return AttentionWeights(self.Wq[:, h * dh:(h + 1) * dh],
                                self.Wk[:, kv * dh:(kv + 1) * dh], dh, 1, 1)


@dataclass
class PowerIterState:
    u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: float = 0.0
    initialized: bool = False
    steps_run: int = 0


def repeat_blocks(z: np.ndarray, g: int, d_h: int) -> np.ndarray:
    """Repeat each ``d_h``-block of ``z`` ``g`` times, in place order."""
    if z.shape[0] % d_h:
        raise DimensionError(f"length {z.shape[0]} not divisible by d_h={d_h}")
    if g == 1:
        return z
    return np.repeat(z.reshape(-1, 1, d_h), g, axis=1).reshape(-1)


def sum_groups(y: np.ndarray, g: int, d_h: int) -> np.ndarray:
    """Adjoint of :func:`repeat_blocks`: sum each run of ``g`` consecutive blocks."""
    if y.shape[0] % (g * d_h):
        raise DimensionError(f"length {y.shape[0]} not divisible by g*d_h={g * d_h}")
    if g == 1:
        return y
    return y.reshape(-1, g, d_h).sum(axis=1).reshape(-1)


def expand_kv(w: AttentionWeights) -> np.ndarray:
    """Explicit ``d x (n_q*d_h)`` key matrix. Test oracle only."""
    d = w.d
    blocks = w.Wk.reshape(d, w.n_kv, 1, w.d_h)
    return np.broadcast_to(blocks, (d, w.n_kv, w.group_size, w.d_h)).reshape(d, -1).copy()


def interaction_matrix(w: AttentionWeights) -> np.ndarray:
    """Materialized ``M = Wq @ expand_kv(Wk).T``. Test oracle only."""
    return w.Wq @ expand_kv(w).T


def apply_m(w: AttentionWeights, v: np.ndarray) -> np.ndarray:
    z = repeat_blocks(matvec_t(w.Wk, v), w.group_size, w.d_h)
    return matvec(w.Wq, z)


def apply_mt(w: AttentionWeights, u: np.ndarray) -> np.ndarray:
    y = sum_groups(matvec_t(w.Wq, u), w.group_size, w.d_h)
    return matvec(w.Wk, y)


def _random_unit(rng: np.random.Generator, d: int) -> np.ndarray:
    return sample_sphere(rng, d)


def power_step(w: AttentionWeights, s: PowerIterState,
               rng: np.random.Generator | None = None) -> PowerIterState:
    """Advance ``s`` by one forward/backward iteration, in place.

    If ``M v`` vanishes, ``v`` is redrawn once (needs ``rng``, else a fixed
    seed is used); a second zero yields ``sigma = 0``.
    """
    if not s.initialized:
        raise RuntimeError("power_step on an uninitialized state; call cold_start first")
    if s.u.shape[0] != w.d or s.v.shape[0] != w.d:
        raise DimensionError(f"state vectors have length {s.v.shape[0]}, weights have d={w.d}")

    u_new = apply_m(w, s.v)
    sigma = float(np.linalg.norm(u_new))
    if sigma == 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        s.v = _random_unit(rng, w.d)
        u_new = apply_m(w, s.v)
        sigma = float(np.linalg.norm(u_new))
        if sigma == 0.0:
            s.sigma = 0.0
            s.steps_run += 1
            return s
    s.u = u_new / sigma
    s.sigma = sigma

    v_new = apply_mt(w, s.u)
    nv = float(np.linalg.norm(v_new))
    # M^T u = 0 cannot happen when u is in range(M), but guard against round-off
    if nv > 0.0:
        s.v = v_new / nv
    s.steps_run += 1
    return s


def cold_start(w: AttentionWeights, rng: np.random.Generator,
               iters: int = COLD_START_ITERS) -> PowerIterState:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    s = PowerIterState(u=_random_unit(rng, w.d), v=_random_unit(rng, w.d), initialized=True)
    for _ in range(iters):
        power_step(w, s, rng)
    return s


def converge(w: AttentionWeights, s: PowerIterState, tol: float = CONVERGE_TOL,
             max_iter: int = CONVERGE_MAX_ITER, rng: np.random.Generator | None = None,
             strict: bool = False) -> tuple[PowerIterState, bool]:
    """Iterate until the relative change in sigma drops below ``tol``.

    Returns ``(state, converged)``. With ``strict`` a missed tolerance raises
    :class:`ConvergenceError` instead.
    """
    prev = s.sigma if s.steps_run else None
    for _ in range(max_iter):
        power_step(w, s, rng)
        if s.sigma == 0.0:
            return s, True
        if prev is not None and abs(s.sigma - prev) <= tol * s.sigma:
            return s, True
        prev = s.sigma
    if strict:
        raise ConvergenceError(f"power iteration did not converge in {max_iter} steps",
                               estimate=s.sigma, iterations=max_iter)
    return s, False


def spectral_norm(w: AttentionWeights, rng: np.random.Generator, tol: float = CONVERGE_TOL,
                  max_iter: int = CONVERGE_MAX_ITER) -> tuple[float, int, bool]:
    """Cold start plus convergence; returns ``(sigma, iterations, converged)``."""
    s = cold_start(w, rng)
    s, ok = converge(w, s, tol=tol, max_iter=max_iter, rng=rng)
    return s.sigma, s.steps_run, ok


def per_head_sigmas(w: AttentionWeights, rng: np.random.Generator,
                    tol: float = CONVERGE_TOL) -> np.ndarray:
    """Converged ``||Wq_h Wk_{kv(h)}^T||_2`` for every query head."""
    return np.array([spectral_norm(w.head(h), rng, tol=tol)[0] for h in range(w.n_q)])
