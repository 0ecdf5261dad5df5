"""Auto-alpha: burn-in slack collection, quantile, safety multiplier, freeze.

The frozen alpha is an empirical choice. It carries no overflow-probability
guarantee; reports label it accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AutoAlphaConfig:
    alpha0: float
    T_calib: int = 100
    q: float = 0.9999
    kappa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in (0, 1]")
        if self.T_calib < 1:
            raise ValueError("T_calib must be >= 1")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.kappa < 1.0:
            raise ValueError("kappa must be >= 1")


@dataclass
class SlackBuffer:
    ratios: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ratios)


def record_slack(buf: SlackBuffer, max_logit: float, B_max: float) -> SlackBuffer:
    """Append ``max_logit / B_max``."""
    if B_max <= 0.0:
        raise ValueError("B_max must be positive")
    if max_logit < 0.0:
        raise ValueError("max_logit must be non-negative")
    buf.ratios.append(max_logit / B_max)
    return buf


def quantile(buf: SlackBuffer, q: float) -> float:
    """Empirical quantile, linear interpolation between order statistics."""
    if not buf.ratios:
        raise ValueError("empty slack buffer")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    return float(np.quantile(np.asarray(buf.ratios), q, method="linear"))


def finalize_alpha(buf: SlackBuffer, cfg: AutoAlphaConfig) -> float:
    if len(buf) < cfg.T_calib:
        raise ValueError(f"need {cfg.T_calib} burn-in samples, have {len(buf)}")
    return quantile(buf, cfg.q) * cfg.kappa


class AutoAlpha:
    """Stateful wrapper: hands out ``alpha0`` during burn-in, then the frozen value."""

    def __init__(self, cfg: AutoAlphaConfig):
        self.cfg = cfg
        self.buffer = SlackBuffer()
        self.alpha_final: float | None = None
        self.steps_seen = 0

    @property
    def frozen(self) -> bool:
        return self.alpha_final is not None

    @property
    def alpha(self) -> float:
        return self.alpha_final if self.frozen else self.cfg.alpha0

    def observe(self, max_logits, B_maxes) -> None:
        """Record one burn-in step (one ratio per layer); freezes after ``T_calib`` steps."""
        if self.frozen:
            return
        for m, b in zip(np.atleast_1d(max_logits), np.atleast_1d(B_maxes)):
            record_slack(self.buffer, float(m), float(b))
        self.steps_seen += 1
        if self.steps_seen >= self.cfg.T_calib:
            a = finalize_alpha(self.buffer, self.cfg)
            # a zero quantile would give a zero scale; keep the smallest positive alpha
            self.alpha_final = min(max(a, np.finfo(float).tiny), 1.0)
