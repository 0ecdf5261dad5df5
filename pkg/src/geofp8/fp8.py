"""Software E4M3 codec, overflow accounting and the two scale policies.

Layout follows the OFP8 E4M3 convention: 1 sign bit, 4 exponent bits with
bias 7, 3 mantissa bits, subnormals, no infinities, and a single NaN pattern
(``S.1111.111``). The largest finite magnitude is ``2**8 * 1.75 = 448``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Literal

import numpy as np

FP8_MAX = 448.0
ETA_FP8 = 0.8
ETA_DELAYED = 0.9
HISTORY_LEN = 16

OverflowMode = Literal["flag_nan", "saturate"]


@dataclass(frozen=True)
class Fp8Spec:
    sign_bits: int = 1
    exp_bits: int = 4
    mantissa_bits: int = 3
    exp_bias: int = 7
    max_finite: float = FP8_MAX
    has_inf: bool = False


E4M3_SPEC = Fp8Spec()


def decode_bits(code: int, spec: Fp8Spec = E4M3_SPEC) -> float:
    """Value of one byte, computed field by field."""
    m_bits = spec.mantissa_bits
    e_max = (1 << spec.exp_bits) - 1
    m_max = (1 << m_bits) - 1
    sign = -1.0 if (code >> (spec.exp_bits + m_bits)) & 1 else 1.0
    exp = (code >> m_bits) & e_max
    man = code & m_max
    if exp == e_max and man == m_max:
        return float("nan")
    if exp == 0:
        return sign * (man / (1 << m_bits)) * 2.0 ** (1 - spec.exp_bias)
    return sign * (1.0 + man / (1 << m_bits)) * 2.0 ** (exp - spec.exp_bias)


class E4M3Codec:
    """Table-driven encoder/decoder.

    ``table`` maps every byte to its value; passing a modified table is the
    fault-injection hook used by the self-test.
    """

    def __init__(self, spec: Fp8Spec = E4M3_SPEC, table: np.ndarray | None = None):
        self.spec = spec
        if table is None:
            table = np.array([decode_bits(c, spec) for c in range(256)])
        self.table = np.asarray(table, dtype=np.float64)
        self.nan_code = 0x7F
        # non-negative half of the codebook; byte value == index, so an even
        # index is an even mantissa LSB
        self._pos = self.table[:0x7F]
        self.max_finite = float(np.nanmax(self.table))

    def decode(self, code) -> np.ndarray | float:
        out = self.table[np.asarray(code, dtype=np.uint8)]
        return float(out) if np.ndim(out) == 0 else out

    def encode_array(self, x, mode: OverflowMode = "flag_nan") -> tuple[np.ndarray, np.ndarray]:
        """Round-to-nearest-even onto the codebook.

        Returns ``(codes, overflowed)``; ``|x| > max_finite`` is an overflow and
        becomes NaN (``flag_nan``) or the signed max (``saturate``).
        """
        if mode not in ("flag_nan", "saturate"):
            raise ValueError(f"unknown overflow mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        a = np.abs(x)
        nan_in = np.isnan(x)
        over = (a > self.max_finite) & ~nan_in
        a_c = np.where(nan_in | over, 0.0, a)

        pos = self._pos
        hi = np.clip(np.searchsorted(pos, a_c, side="left"), 0, len(pos) - 1)
        lo = np.clip(hi - 1, 0, None)
        d_lo = a_c - pos[lo]
        d_hi = pos[hi] - a_c
        pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
        idx = np.where(pick_hi, hi, lo).astype(np.uint8)

        if mode == "saturate":
            idx = np.where(over, np.uint8(0x7E), idx)
        else:
            idx = np.where(over, np.uint8(self.nan_code), idx)
        idx = np.where(nan_in, np.uint8(self.nan_code), idx)
        sign = np.signbit(x) & ~nan_in & ~(over & (mode == "flag_nan"))
        codes = (idx | (sign.astype(np.uint8) << 7)).astype(np.uint8)
        return codes, over

    def encode(self, x: float, mode: OverflowMode = "flag_nan") -> tuple[int, bool]:
        codes, over = self.encode_array(np.array([x]), mode)
        return int(codes[0]), bool(over[0])

    def finite_codes(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.table))


E4M3 = E4M3Codec()


def encode(x: float, mode: OverflowMode = "flag_nan", codec: E4M3Codec = E4M3) -> tuple[int, bool]:
    return codec.encode(x, mode)


def decode(code: int, codec: E4M3Codec = E4M3) -> float:
    return codec.decode(code)


@dataclass(frozen=True)
class QuantReport:
    overflow_count: int
    max_abs_input: float
    max_abs_scaled: float
    utilization: float


def quantize_tensor(S, scale: float, mode: OverflowMode = "flag_nan",
                    codec: E4M3Codec = E4M3) -> tuple[np.ndarray, QuantReport]:
    """Encode ``S / scale`` entrywise and account for overflows."""
    if not scale > 0.0:
        raise ValueError("scale must be positive")
    S = np.asarray(S, dtype=np.float64)
    scaled = S / scale
    codes, over = codec.encode_array(scaled, mode)
    max_in = float(np.abs(S).max()) if S.size else 0.0
    max_scaled = float(np.abs(scaled).max()) if S.size else 0.0
    return codes, QuantReport(
        overflow_count=int(over.sum()),
        max_abs_input=max_in,
        max_abs_scaled=max_scaled,
        utilization=max_scaled / codec.max_finite,
    )


def geometry_scale(sigma_qk: float, alpha: float, d: int, d_h: int,
                   eta_fp8: float = ETA_FP8) -> float:
    """Predictive per-layer scale: calibrated bound over the safe FP8 range."""
    if sigma_qk < 0 or not 0.0 < alpha <= 1.0 or eta_fp8 <= 0:
        raise ValueError("need sigma >= 0, alpha in (0, 1], eta > 0")
    return float((alpha * sigma_qk * d / np.sqrt(d_h)) / (eta_fp8 * FP8_MAX))


class DelayedScaleState:
    """Amax history for the delayed-scaling baseline (ring buffer)."""

    def __init__(self, history_len: int = HISTORY_LEN, eta: float = ETA_DELAYED,
                 init_value: float = 1.0):
        if history_len < 1:
            raise ValueError("history_len must be >= 1")
        self.eta = eta
        self.init_value = init_value
        self.history: deque[float] = deque([init_value] * history_len, maxlen=history_len)

    def scale(self) -> float:
        return max(self.history) / (FP8_MAX * self.eta)

    def update(self, observed_max: float) -> "DelayedScaleState":
        if observed_max < 0:
            raise ValueError("observed_max must be non-negative")
        self.history.append(float(observed_max))
        return self

    def reset(self) -> None:
        """Forget all history, as a fresh process after checkpoint load would."""
        self.history.extend([self.init_value] * self.history.maxlen)


def delayed_scale(state: DelayedScaleState) -> float:
    return state.scale()


def update_history(state: DelayedScaleState, observed_max: float) -> DelayedScaleState:
    return state.update(observed_max)
