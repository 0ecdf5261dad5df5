"""Scenario simulator and Monte-Carlo validators on synthetic models.

Both scale policies run side by side on bit-identical weights and tokens, so
any difference in overflow counts comes from the scale rule alone.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import bounds
from .attention import head_scores, normalize_tokens
from .calibration import AutoAlpha, AutoAlphaConfig
from .fp8 import (
    ETA_DELAYED,
    ETA_FP8,
    HISTORY_LEN,
    DelayedScaleState,
    geometry_scale,
    quantize_tensor,
)
from .linalg import make_rng, random_orthonormal, sample_sphere, spectral_norm_oracle
from .spectral import AttentionWeights, cold_start, converge, interaction_matrix, power_step

SCENARIO_KINDS = ("stationary", "pretrained_load", "checkpoint_resume", "lr_spike", "weight_spike")
MC_CHUNK = 4096


@dataclass(frozen=True)
class ModelConfig:
    """Synthetic model; ``alpha=None`` means the rank-aware alpha_min (capped at 1)."""

    d: int = 128
    d_h: int = 16
    n_q: int = 4
    n_kv: int = 2
    n_layers: int = 2
    L: int = 64
    sigma_target: float | tuple[float, ...] = 20.0
    spectral_decay: float = 0.8
    alpha: float | None = None
    delta_star: float = 1e-6
    eta_fp8: float = ETA_FP8
    eta_delayed: float = ETA_DELAYED
    history_len: int = HISTORY_LEN
    cold_start_iters: int = 5
    resample_tokens: bool = False

    def __post_init__(self):
        if self.n_q % self.n_kv:
            raise ValueError("n_q must be a multiple of n_kv")
        if min(self.d, self.d_h, self.n_q, self.n_kv, self.n_layers, self.L) < 1:
            raise ValueError("model dimensions must be positive")
        if not 0.0 < self.spectral_decay <= 1.0:
            raise ValueError("spectral_decay must lie in (0, 1]")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if isinstance(self.sigma_target, (list, tuple)) and len(self.sigma_target) != self.n_layers:
            raise ValueError("one sigma_target per layer")

    def sigma_for(self, layer: int) -> float:
        if isinstance(self.sigma_target, (list, tuple)):
            return float(self.sigma_target[layer])
        return float(self.sigma_target)

    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        dims = bounds.ModelDims(self.d, self.d_h, self.n_layers, self.n_q)
        target = bounds.CalibrationTarget(self.delta_star, self.L)
        res = bounds.calibrate(dims, target, allow_alpha_above_one=True)
        return min(res.alpha_min, 1.0)


@dataclass(frozen=True)
class Scenario:
    kind: str = "weight_spike"
    steps_before: int = 10
    steps_after: int = 10
    spike_factor: float = 4.0
    lr_before: float = 1e-5
    lr_after: float = 1e-3
    drift_scale: float = 200.0
    warm_history: bool | None = None

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {SCENARIO_KINDS}")
        if self.steps_before < 0 or self.steps_after < 0 or self.steps < 1:
            raise ValueError("scenario needs at least one step")
        if self.spike_factor <= 0:
            raise ValueError("spike_factor must be positive")
        if self.lr_before < 0 or self.lr_after < 0 or self.drift_scale < 0:
            raise ValueError("learning rates and drift_scale must be non-negative")

    @property
    def steps(self) -> int:
        return self.steps_before + self.steps_after

    @property
    def event_step(self) -> int | None:
        if self.kind == "stationary":
            return None
        if self.kind == "pretrained_load":
            return 0
        return self.steps_before

    @property
    def history_is_warm(self) -> bool:
        if self.warm_history is not None:
            return self.warm_history
        return self.kind != "pretrained_load"


@dataclass
class LayerStep:
    layer: int
    max_logit: float
    head_max_logits: list[float]
    sigma_estimate: float
    alpha: float
    scale_geometry: float
    scale_delayed: float
    overflows_geometry: int
    overflows_delayed: int
    max_scaled_geometry: float
    max_scaled_delayed: float
    utilization_geometry: float
    utilization_delayed: float
    within_calibrated_bound: bool


@dataclass
class StepReport:
    step: int
    layers: list[LayerStep]
    calibrating: bool = False

    @property
    def max_logit(self) -> float:
        return max(l.max_logit for l in self.layers)

    @property
    def overflows_geometry(self) -> int:
        return sum(l.overflows_geometry for l in self.layers)

    @property
    def overflows_delayed(self) -> int:
        return sum(l.overflows_delayed for l in self.layers)

    @property
    def utilization_geometry(self) -> float:
        return max(l.utilization_geometry for l in self.layers)


@dataclass
class RunReport:
    seed: int
    scenario: Scenario
    model: ModelConfig
    alpha: float
    geometry_mode: str
    steps: list[StepReport]
    alpha_final: float | None = None

    @property
    def summary(self) -> dict:
        ev = self.scenario.event_step
        at_event = self.steps[ev] if ev is not None and ev < len(self.steps) else None
        return {
            "total_overflows_geometry": sum(s.overflows_geometry for s in self.steps),
            "total_overflows_delayed": sum(s.overflows_delayed for s in self.steps),
            "steps_with_overflow_geometry": sum(s.overflows_geometry > 0 for s in self.steps),
            "steps_with_overflow_delayed": sum(s.overflows_delayed > 0 for s in self.steps),
            "max_scaled_geometry": max(l.max_scaled_geometry for s in self.steps for l in s.layers),
            "max_scaled_delayed": max(l.max_scaled_delayed for s in self.steps for l in s.layers),
            "event_step": ev,
            "layers_overflowed_at_event_geometry":
                None if at_event is None else sum(l.overflows_geometry > 0 for l in at_event.layers),
            "layers_overflowed_at_event_delayed":
                None if at_event is None else sum(l.overflows_delayed > 0 for l in at_event.layers),
            "n_layers": self.model.n_layers,
        }


def synthetic_weights(rng: np.random.Generator, d: int, d_h: int, n_q: int, n_kv: int,
                      sigma_target: float, spectral_decay: float = 0.8) -> AttentionWeights:
    """Gaussian projections with column energy ``decay**j``, rescaled to hit ``sigma_target``.

    The decay plants a gap in the interaction spectrum, as trained attention
    weights have, so warm-started power iteration tracks it closely. Since
    ``sigma(s*Wq, s*Wk) = s**2 * sigma``, the rescale is exact.
    """
    cols_q = spectral_decay ** np.arange(n_q * d_h)
    cols_k = spectral_decay ** np.arange(n_kv * d_h)
    Wq = rng.standard_normal((d, n_q * d_h)) * cols_q / math.sqrt(d)
    Wk = rng.standard_normal((d, n_kv * d_h)) * cols_k / math.sqrt(d)
    w = AttentionWeights(Wq, Wk, d_h, n_q, n_kv)
    sigma = spectral_norm_oracle(interaction_matrix(w))
    return w.scaled(math.sqrt(sigma_target / sigma))


def _drift(w: AttentionWeights, rng: np.random.Generator, lr: float, drift_scale: float) -> AttentionWeights:
    eps = lr * drift_scale
    if eps == 0.0:
        return w
    Wq = w.Wq * (1.0 + eps * rng.standard_normal(w.Wq.shape))
    Wk = w.Wk * (1.0 + eps * rng.standard_normal(w.Wk.shape))
    return AttentionWeights(Wq, Wk, w.d_h, w.n_q, w.n_kv)


def _tokens(rng: np.random.Generator, model: ModelConfig) -> np.ndarray:
    return normalize_tokens(rng.standard_normal((model.L, model.d)))


class _Layer:
    def __init__(self, idx: int, w: AttentionWeights, X: np.ndarray, model: ModelConfig,
                 rng: np.random.Generator):
        self.idx = idx
        self.w = w
        self.X = X
        self.model = model
        self.power = cold_start(w, rng, model.cold_start_iters)
        self.delayed = DelayedScaleState(model.history_len, model.eta_delayed)

    def scores(self) -> tuple[np.ndarray, list[float]]:
        heads = [head_scores(self.X, self.X, self.w, h) for h in range(self.w.n_q)]
        return np.sum(heads, axis=0), [float(np.abs(S).max()) for S in heads]


def run_scenario(sc: Scenario, model: ModelConfig, seed: int,
                 auto_alpha: AutoAlphaConfig | None = None) -> RunReport:
    """Simulate ``sc.steps`` steps with both scale policies on the same weights.

    Weights are built from ``seed``; every random draw comes from streams
    derived from it, so the report is a pure function of its arguments.
    """
    init_rng = make_rng(seed)
    drift_rng = make_rng(seed + 1)
    token_rng = make_rng(seed + 2)
    power_rng = make_rng(seed + 3)
    alpha_fixed = model.resolved_alpha()

    layers = []
    for i in range(model.n_layers):
        w = synthetic_weights(init_rng, model.d, model.d_h, model.n_q, model.n_kv,
                              model.sigma_for(i), model.spectral_decay)
        layers.append(_Layer(i, w, _tokens(token_rng, model), model, power_rng))

    if sc.history_is_warm:
        # steady state before the run: each history has seen this weight configuration
        for _ in range(model.history_len):
            for lay in layers:
                if model.resample_tokens:
                    lay.X = _tokens(token_rng, model)
                S, _ = lay.scores()
                lay.delayed.update(float(np.abs(S).max()))
                power_step(lay.w, lay.power, power_rng)

    auto = AutoAlpha(auto_alpha) if auto_alpha is not None else None
    event = sc.event_step
    steps: list[StepReport] = []
    for t in range(sc.steps):
        lr = sc.lr_after if (sc.kind == "lr_spike" and event is not None and t >= event) else sc.lr_before
        for lay in layers:
            if sc.kind != "weight_spike" and sc.kind != "stationary" and t > 0:
                lay.w = _drift(lay.w, drift_rng, lr, sc.drift_scale)
            if t == event:
                if sc.kind == "weight_spike":
                    lay.w = lay.w.scaled(sc.spike_factor)
                elif sc.kind == "checkpoint_resume":
                    lay.delayed.reset()
                    lay.power = cold_start(lay.w, power_rng, model.cold_start_iters)
            if model.resample_tokens:
                lay.X = _tokens(token_rng, model)

        calibrating = auto is not None and not auto.frozen
        alpha = auto.alpha if auto is not None else alpha_fixed
        records = []
        for lay in layers:
            S, head_max = lay.scores()
            max_logit = float(np.abs(S).max())

            sigma = power_step(lay.w, lay.power, power_rng).sigma
            B_max = bounds.worst_case_bound(sigma, model.d, model.d_h)
            g_scale = geometry_scale(sigma, alpha, model.d, model.d_h, model.eta_fp8)
            _, g_rep = quantize_tensor(S, g_scale)

            d_scale = lay.delayed.scale()
            _, d_rep = quantize_tensor(S, d_scale)
            lay.delayed.update(max_logit)

            records.append(LayerStep(
                layer=lay.idx,
                max_logit=max_logit,
                head_max_logits=head_max,
                sigma_estimate=sigma,
                alpha=alpha,
                scale_geometry=g_scale,
                scale_delayed=d_scale,
                overflows_geometry=g_rep.overflow_count,
                overflows_delayed=d_rep.overflow_count,
                max_scaled_geometry=g_rep.max_abs_scaled,
                max_scaled_delayed=d_rep.max_abs_scaled,
                utilization_geometry=g_rep.utilization,
                utilization_delayed=d_rep.utilization,
                within_calibrated_bound=max_logit <= alpha * B_max,
            ))
        if calibrating:
            auto.observe([r.max_logit for r in records],
                         [bounds.worst_case_bound(r.sigma_estimate, model.d, model.d_h) for r in records])
        steps.append(StepReport(step=t, layers=records, calibrating=calibrating))

    return RunReport(seed=seed, scenario=sc, model=model, alpha=alpha_fixed,
                     geometry_mode="auto-alpha" if auto is not None else "fixed",
                     steps=steps, alpha_final=auto.alpha_final if auto is not None else None)


# -- Monte Carlo ------------------------------------------------------------

def _chunks(trials: int, chunk: int) -> list[int]:
    sizes = [chunk] * (trials // chunk)
    if trials % chunk:
        sizes.append(trials % chunk)
    return sizes


def _map_chunks(fn, sizes: list[int], seed: int, workers: int) -> list:
    jobs = [(seed + 1 + i, n) for i, n in enumerate(sizes)]
    if workers <= 1:
        return [fn(s, n) for s, n in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


@dataclass
class ProjectionReport:
    d: int
    k: int
    trials: int
    seed: int
    mean: float
    stderr: float
    expected_mean: float
    tails: dict[float, dict[str, float]]
    ks_pvalue: float | None

    @property
    def mean_within_3se(self) -> bool:
        if self.stderr == 0.0:
            return self.mean == self.expected_mean
        return abs(self.mean - self.expected_mean) <= 3.0 * self.stderr

    @property
    def tails_within_bound(self) -> bool:
        return all(t["empirical"] <= t["bound"] for t in self.tails.values())


def projection_samples(d: int, k: int, trials: int, seed: int, workers: int = 1) -> np.ndarray:
    """``||V^T u||^2`` for one random orthonormal ``V`` and ``trials`` uniform ``u``."""
    V = random_orthonormal(make_rng(seed), d, k)

    def run(s: int, n: int) -> np.ndarray:
        U = sample_sphere(make_rng(s), d, n)
        return np.einsum("ij,ij->i", U @ V, U @ V)

    return np.concatenate(_map_chunks(run, _chunks(trials, MC_CHUNK), seed, workers))


def monte_carlo_projection(d: int, k: int, trials: int = 100_000, seed: int = 0,
                           gammas: Sequence[float] = (1.5, 2.0, 3.0),
                           workers: int = 1) -> ProjectionReport:
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    x = projection_samples(d, k, trials, seed, workers)
    mu = k / d
    tails = {}
    for g in gammas:
        tails[float(g)] = {
            "threshold": g * mu,
            "empirical": float(np.mean(x >= g * mu)),
            "bound": bounds.beta_tail_bound(k, g),
        }
    ks = None
    if k < d:
        ks = float(stats.kstest(x, stats.beta(k / 2, (d - k) / 2).cdf).pvalue)
    return ProjectionReport(d=d, k=k, trials=trials, seed=seed, mean=float(x.mean()),
                            stderr=float(x.std(ddof=1) / math.sqrt(trials)),
                            expected_mean=mu, tails=tails, ks_pvalue=ks)


@dataclass
class OverflowCell:
    alpha: float
    frequency: float
    exceedances: int
    T1: float
    T2: float

    @property
    def bound(self) -> float:
        return self.T1 + self.T2

    @property
    def within_bound(self) -> bool:
        return self.frequency <= self.bound


@dataclass
class OverflowMCReport:
    d: int
    d_h: int
    L: int
    gamma: float
    trials: int
    seed: int
    spectrum: str
    cells: list[OverflowCell]
    max_ratio: float


def overflow_ratios(d: int, d_h: int, L: int, trials: int, seed: int,
                    spectrum: str = "gaussian", workers: int = 1) -> np.ndarray:
    """Per trial, ``max_ij |u_i^T M u_j| / ||M||`` for a fresh rank-``d_h`` ``M``.

    ``gaussian`` draws ``M = A B^T`` with Gaussian factors; ``flat`` uses equal
    singular values, the least favourable spectrum for a fixed norm.
    """
    if spectrum not in ("gaussian", "flat"):
        raise ValueError(f"unknown spectrum {spectrum!r}")

    def run(s: int, n: int) -> np.ndarray:
        rng = make_rng(s)
        out = np.empty(n)
        for t in range(n):
            if spectrum == "flat":
                A = random_orthonormal(rng, d, d_h)
                B = random_orthonormal(rng, d, d_h)
                norm = 1.0
            else:
                A = rng.standard_normal((d, d_h))
                B = rng.standard_normal((d, d_h))
                # ||A B^T|| = ||R_A R_B^T|| with thin QR factors
                norm = spectral_norm_oracle(np.linalg.qr(A, mode="r") @ np.linalg.qr(B, mode="r").T)
            Uq = sample_sphere(rng, d, L)
            Uk = sample_sphere(rng, d, L)
            out[t] = np.abs((Uq @ A) @ (Uk @ B).T).max() / norm
        return out

    sizes = _chunks(trials, 64)
    return np.concatenate(_map_chunks(run, sizes, seed, workers))


def monte_carlo_overflow(d: int, d_h: int, L: int, gamma: float, alphas: float | Sequence[float],
                         trials: int = 1000, seed: int = 0, spectrum: str = "gaussian",
                         workers: int = 1) -> OverflowMCReport:
    """Empirical ``Pr(max|u_i^T M u_j| >= alpha ||M||)`` against ``T1 + T2``."""
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    alphas = [alphas] if np.isscalar(alphas) else list(alphas)
    if any(a <= 0 for a in alphas):
        raise ValueError("alpha must be positive")
    r = overflow_ratios(d, d_h, L, trials, seed, spectrum, workers)
    dims = bounds.ModelDims(d, d_h, 1, 1)
    cells = []
    for a in alphas:
        hits = int(np.sum(r >= a))
        cells.append(OverflowCell(alpha=float(a), frequency=hits / trials, exceedances=hits,
                                  T1=bounds.tail_T1(dims, L, gamma),
                                  T2=bounds.tail_T2(dims, L, gamma, a)))
    return OverflowMCReport(d=d, d_h=d_h, L=L, gamma=gamma, trials=trials, seed=seed,
                            spectrum=spectrum, cells=cells, max_ratio=float(r.max()))


@dataclass
class SpectralProfile:
    sigmas: list[float]
    iterations: list[int]
    converged: list[bool]

    @property
    def mean(self) -> float:
        return float(np.mean(self.sigmas))

    @property
    def max(self) -> float:
        return float(np.max(self.sigmas))

    @property
    def min(self) -> float:
        return float(np.min(self.sigmas))

    @property
    def max_layer(self) -> int:
        return int(np.argmax(self.sigmas))

    def table(self) -> dict[str, float]:
        return {"Mean": self.mean, "Max": self.max, "Min": self.min, "Max Layer": self.max_layer}


def spectral_profile(layers: Sequence[AttentionWeights], seed: int = 0,
                     tol: float = 1e-10) -> SpectralProfile:
    if not layers:
        raise ValueError("need at least one layer")
    sig, its, ok = [], [], []
    for i, w in enumerate(layers):
        s = cold_start(w, make_rng(seed + i))
        s, conv = converge(w, s, tol=tol)
        sig.append(s.sigma)
        its.append(s.steps_run)
        ok.append(conv)
    return SpectralProfile(sig, its, ok)


def report_dict(obj) -> dict:
    return asdict(obj)
