"""Closed-form logit bounds and the rank-aware (gamma, alpha) calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass

GAMMA_TOL = 1e-9
_GAMMA_BRACKET = 64.0
_GAMMA_CAP = 1e15


class InfeasibleTargetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d: int
    d_h: int
    n_layers: int
    n_heads: int

    def __post_init__(self):
        if min(self.d, self.d_h, self.n_layers, self.n_heads) < 1:
            raise ValueError("all model dimensions must be positive")

    @property
    def N(self) -> int:
        return self.n_layers * self.n_heads


@dataclass(frozen=True)
class CalibrationTarget:
    delta_star: float = 1e-6
    L: int = 1024

    def __post_init__(self):
        if not 0.0 < self.delta_star < 1.0:
            raise ValueError(f"delta_star must lie in (0, 1), got {self.delta_star}")
        if self.L < 1:
            raise ValueError("sequence length L must be >= 1")


@dataclass(frozen=True)
class CalibrationResult:
    gamma: float
    alpha_min: float
    T1: float
    T2: float
    improvement: float
    overflow_bound: float
    split: float = 0.5


# Architectures used for the reference calibration tables. N counts query heads.
REFERENCE_MODELS: dict[str, dict] = {
    "gpt2-xl": dict(d=1600, d_h=64, n_layers=48, n_heads=25, n_kv=25),
    "mistral-7b": dict(d=4096, d_h=128, n_layers=32, n_heads=32, n_kv=8),
    "llama2-13b": dict(d=5120, d_h=128, n_layers=40, n_heads=40, n_kv=40),
    "llama2-70b": dict(d=8192, d_h=128, n_layers=80, n_heads=64, n_kv=8),
}


def reference_dims(name: str) -> ModelDims:
    spec = REFERENCE_MODELS[name]
    return ModelDims(spec["d"], spec["d_h"], spec["n_layers"], spec["n_heads"])


def naive_bound(sq: float, sk: float, B_X: float, d_h: int) -> float:
    """``||Wq|| ||Wk|| B_X^2 / sqrt(d_h)``."""
    return sq * sk * B_X ** 2 / math.sqrt(d_h)


def interaction_bound(sigma_qk: float, B_X: float, d_h: int) -> float:
    """``||Wq Wk^T|| B_X^2 / sqrt(d_h)``; with ``B_X = sqrt(d)`` this is B_max."""
    return sigma_qk * B_X ** 2 / math.sqrt(d_h)


def worst_case_bound(sigma_qk: float, d: int, d_h: int) -> float:
    return sigma_qk * d / math.sqrt(d_h)


def calibrated_bound(alpha: float, B_max: float) -> float:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha * B_max


def h(gamma: float) -> float:
    return gamma - 1.0 - math.log(gamma)


def _gamma_rhs(dims: ModelDims, target: CalibrationTarget, split: float) -> float:
    return (2.0 / dims.d_h) * math.log(dims.N * target.L / (split * target.delta_star))


def solve_gamma(dims: ModelDims, target: CalibrationTarget, split: float = 0.5) -> float:
    """Smallest ``gamma > 1`` with ``N*T1 <= split*delta_star``.

    ``h`` is strictly increasing on ``(1, inf)``, so plain bisection on the
    equality works once the upper bracket covers the root.
    """
    _check_split(split)
    rhs = _gamma_rhs(dims, target, split)
    if rhs <= 0.0:
        # any gamma > 1 already satisfies the T1 budget
        return 1.0 + GAMMA_TOL
    lo, hi = 1.0, _GAMMA_BRACKET
    while h(hi) < rhs:
        hi *= 2.0
        if hi > _GAMMA_CAP:
            raise InfeasibleTargetError("no gamma satisfies the T1 budget")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) < rhs:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return hi


def alpha_min(dims: ModelDims, target: CalibrationTarget, gamma: float,
              split: float = 0.5) -> float:
    """Smallest alpha with ``N*T2 <= (1-split)*delta_star`` at this gamma."""
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    _check_split(split)
    L = target.L
    log_term = math.log(2.0 * dims.N * L * L / ((1.0 - split) * target.delta_star))
    return math.sqrt(2.0 * gamma * dims.d_h) / dims.d * math.sqrt(log_term)


def tail_T1(dims: ModelDims, L: int, gamma: float) -> float:
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    return L * math.exp(-(dims.d_h / 2.0) * h(gamma))


def tail_T2(dims: ModelDims, L: int, gamma: float, alpha: float) -> float:
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    return 2.0 * L * L * math.exp(-(dims.d * alpha) ** 2 / (2.0 * gamma * dims.d_h))


def overflow_prob_bound(dims: ModelDims, target: CalibrationTarget, gamma: float,
                        alpha: float) -> float:
    """Union bound ``N (T1 + T2)`` over all heads."""
    return dims.N * (tail_T1(dims, target.L, gamma) + tail_T2(dims, target.L, gamma, alpha))


def rank_agnostic_bound(d: int, L: int, alpha: float) -> float:
    """Levy-lemma tail without the rank constraint: ``2 L^2 exp(-d alpha^2 / 2)``."""
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    return 2.0 * L * L * math.exp(-d * alpha ** 2 / 2.0)


def improvement_factor(d: int, d_h: int, gamma: float) -> float:
    """Ratio of rank-aware to rank-agnostic concentration exponents."""
    return d / (gamma * d_h)


def beta_tail_bound(k: int, gamma: float) -> float:
    """Chernoff bound on ``Pr(Beta(k/2, (d-k)/2) >= gamma k / d)``."""
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    return math.exp(-(k / 2.0) * h(gamma))


def calibrate(dims: ModelDims, target: CalibrationTarget, split: float = 0.5,
              allow_alpha_above_one: bool = False) -> CalibrationResult:
    """Solve gamma then alpha_min and report both tail terms.

    An ``alpha_min`` at or above 1 means the rank-aware rule cannot beat the
    worst-case bound for this target; that raises unless explicitly allowed.
    """
    gamma = solve_gamma(dims, target, split)
    a = alpha_min(dims, target, gamma, split)
    if a >= 1.0 and not allow_alpha_above_one:
        raise InfeasibleTargetError(
            f"alpha_min={a:.4g} >= 1: target delta*={target.delta_star} with L={target.L} "
            f"is not reachable below the worst-case bound for d={dims.d}, d_h={dims.d_h}"
        )
    T1 = tail_T1(dims, target.L, gamma)
    T2 = tail_T2(dims, target.L, gamma, a)
    return CalibrationResult(
        gamma=gamma,
        alpha_min=a,
        T1=T1,
        T2=T2,
        improvement=improvement_factor(dims.d, dims.d_h, gamma),
        overflow_bound=dims.N * (T1 + T2),
        split=split,
    )


def _check_split(split: float) -> None:
    if not 0.0 < split < 1.0:
        raise ValueError(f"split must lie in (0, 1), got {split}")
