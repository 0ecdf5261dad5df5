"""Toy attention layer: normalized tokens, bilinear scores, RoPE and the
geometry-aware forward pass with FP8-quantized logits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .bounds import interaction_bound, worst_case_bound
from .fp8 import ETA_FP8, E4M3, E4M3Codec, OverflowMode, QuantReport, geometry_scale, quantize_tensor
from .linalg import DimensionError, as_matrix, spectral_norm_oracle
from .spectral import AttentionWeights, PowerIterState, expand_kv, power_step

ROPE_BASE = 10_000.0


def normalize_tokens(X) -> np.ndarray:
    """Rescale every row to norm exactly ``sqrt(d)`` (RMSNorm without gain)."""
    X = as_matrix(X)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero token row(s) at {np.flatnonzero(norms == 0.0).tolist()}")
    out = X * (math.sqrt(X.shape[1]) / norms)[:, None]
    out.setflags(write=False)
    return out


def head_scores(Xq: np.ndarray, Xk: np.ndarray, w: AttentionWeights, head: int) -> np.ndarray:
    """``L_q x L_k`` scores of one query head against its (possibly shared) kv head."""
    if Xq.shape[1] != w.d or Xk.shape[1] != w.d:
        raise DimensionError(f"token width {Xq.shape[1]}/{Xk.shape[1]} != d={w.d}")
    hw = w.head(head)
    return (Xq @ hw.Wq) @ (Xk @ hw.Wk).T / math.sqrt(w.d_h)


attention_scores = head_scores


def layer_scores(Xq: np.ndarray, Xk: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """``Q K^T / sqrt(d_h)`` with all heads concatenated, i.e. ``X M X^T / sqrt(d_h)``."""
    if Xq.shape[1] != w.d or Xk.shape[1] != w.d:
        raise DimensionError(f"token width {Xq.shape[1]}/{Xk.shape[1]} != d={w.d}")
    return (Xq @ w.Wq) @ (Xk @ expand_kv(w)).T / math.sqrt(w.d_h)


def softmax(S: np.ndarray) -> np.ndarray:
    z = S - S.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class RopeConfig:
    d_h: int
    base: float = ROPE_BASE

    def __post_init__(self):
        if self.d_h % 2:
            raise ValueError("RoPE needs an even head dimension")
        if self.base <= 1.0:
            raise ValueError("RoPE base must exceed 1")

    @property
    def frequencies(self) -> np.ndarray:
        return self.base ** (-2.0 * np.arange(self.d_h // 2) / self.d_h)


def rope_rotation(m: float, cfg: RopeConfig) -> np.ndarray:
    """Block-diagonal rotation for position ``m``; block ``i`` turns by ``m * w_i``."""
    if m < 0:
        raise ValueError("position must be non-negative")
    theta = m * cfg.frequencies
    c, s = np.cos(theta), np.sin(theta)
    R = np.zeros((cfg.d_h, cfg.d_h))
    i = np.arange(0, cfg.d_h, 2)
    R[i, i] = c
    R[i, i + 1] = -s
    R[i + 1, i] = s
    R[i + 1, i + 1] = c
    return R


def rope_relative(m: float, n: float, cfg: RopeConfig, n_heads: int = 1) -> np.ndarray:
    """``R_m^T R_n`` repeated over ``n_heads`` head blocks."""
    R = rope_rotation(m, cfg).T @ rope_rotation(n, cfg)
    return np.kron(np.eye(n_heads), R) if n_heads > 1 else R


@dataclass
class RopeNormReport:
    sigma_qk: float
    naive_norm: float
    max_ratio: float
    argmax_pair: tuple[float, float]
    tol: float
    within_tol: bool
    rigorous_ok: bool
    violations: list[tuple[float, float, float]] = field(default_factory=list)


def rope_effective_norm_check(w: AttentionWeights, cfg: RopeConfig, positions: Sequence[float],
                              tol: float = 0.01) -> RopeNormReport:
    """Compare ``||Wq R_m^T R_n Wk^T||`` over position pairs with the unrotated norm.

    All norms use the Gram-matrix oracle. The rotation acts on every query
    head block, with GQA keys expanded to match.
    """
    if len(positions) == 0:
        raise ValueError("positions must be non-empty")
    if cfg.d_h != w.d_h:
        raise ValueError("RoPE head dimension does not match the weights")
    Wk_exp = expand_kv(w)
    sigma = spectral_norm_oracle(w.Wq @ Wk_exp.T)
    naive = spectral_norm_oracle(w.Wq) * spectral_norm_oracle(Wk_exp)
    best, arg = 0.0, (positions[0], positions[0])
    violations = []
    rigorous_ok = True
    for m in positions:
        for n in positions:
            Rmn = rope_relative(m, n, cfg, w.n_q)
            eff = spectral_norm_oracle(w.Wq @ Rmn @ Wk_exp.T)
            ratio = eff / sigma if sigma > 0 else (0.0 if eff == 0 else math.inf)
            if ratio > best:
                best, arg = ratio, (m, n)
            if ratio > 1.0 + tol:
                violations.append((m, n, ratio))
            if eff > naive * (1.0 + 1e-12):
                rigorous_ok = False
    return RopeNormReport(sigma_qk=sigma, naive_norm=naive, max_ratio=best, argmax_pair=arg,
                          tol=tol, within_tol=best <= 1.0 + tol, rigorous_ok=rigorous_ok,
                          violations=violations)


@dataclass
class ForwardReport:
    sigma: float
    B_max: float
    B_alpha: float
    scale: float
    max_logit: float
    head_max_logits: list[float]
    quant: QuantReport

    @property
    def overflows(self) -> int:
        return self.quant.overflow_count


def forward_geometry(X: np.ndarray, w: AttentionWeights, state: PowerIterState | Sequence[PowerIterState],
                     alpha: float, eta: float = ETA_FP8,
                     mode: Literal["concatenated", "per_head"] = "concatenated",
                     Wv: np.ndarray | None = None, Wo: np.ndarray | None = None,
                     overflow_mode: OverflowMode = "flag_nan", codec: E4M3Codec = E4M3,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardReport]:
    """One geometry-aware attention forward pass.

    Stage 1 advances the power iteration once, stage 2 turns the estimate
    into a scale, stage 3 computes and FP8-quantizes the scaled logits. In
    ``concatenated`` mode the scores are ``X M X^T / sqrt(d_h)`` for the
    whole layer; in ``per_head`` mode ``state`` holds one state per query
    head and the layer scale uses the largest per-head norm.
    """
    d, dh = w.d, w.d_h
    if X.shape[1] != d:
        raise DimensionError(f"token width {X.shape[1]} != d={d}")
    heads = [head_scores(X, X, w, h) for h in range(w.n_q)]
    head_max = [float(np.abs(S).max()) for S in heads]

    if mode == "concatenated":
        if isinstance(state, PowerIterState):
            sigma = power_step(w, state, rng).sigma
        else:
            raise TypeError("concatenated mode takes a single PowerIterState")
        S = np.sum(heads, axis=0)
    elif mode == "per_head":
        if len(state) != w.n_q:
            raise ValueError(f"per_head mode needs {w.n_q} states, got {len(state)}")
        sigma = max(power_step(w.head(h), s, rng).sigma for h, s in enumerate(state))
        S = None
    else:
        raise ValueError(f"unknown mode {mode!r}")

    B_max = worst_case_bound(sigma, d, dh)
    scale = geometry_scale(sigma, alpha, d, dh, eta)
    if scale == 0.0:
        scale = np.finfo(np.float64).tiny

    S_eff = np.stack(heads) if S is None else S[None]
    codes, quant = quantize_tensor(S_eff, scale, overflow_mode, codec)
    # softmax sees the FP8 values, so an overflow NaN propagates into the output
    S_fp8 = codec.decode(codes)

    V = X if Wv is None else X @ Wv
    outs = [softmax(Sh) @ V for Sh in S_fp8]
    out = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
    if Wo is not None:
        out = out @ Wo
    report = ForwardReport(sigma=sigma, B_max=B_max, B_alpha=alpha * B_max, scale=scale,
                           max_logit=quant.max_abs_input, head_max_logits=head_max, quant=quant)
    return out, report


def score_bound_slack(X: np.ndarray, w: AttentionWeights, head: int, sigma_head: float) -> float:
    """``interaction_bound - max|S|`` for one head; negative means a violation."""
    S = head_scores(X, X, w, head)
    B_X = float(np.linalg.norm(X, axis=1).max())
    return interaction_bound(sigma_head, B_X, w.d_h) - float(np.abs(S).max())
