"""Quick internal consistency checks behind ``geofp8 selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bounds
from .fp8 import E4M3, E4M3Codec, decode_bits
from .linalg import make_rng, matvec, matvec_t, spectral_norm_oracle
from .spectral import AttentionWeights, interaction_matrix, repeat_blocks, spectral_norm, sum_groups


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def corrupted_codec() -> E4M3Codec:
    """Codec with two adjacent codebook entries swapped (fault-injection hook)."""
    table = E4M3.table.copy()
    table[0x40], table[0x41] = table[0x41], table[0x40]
    return E4M3Codec(table=table)


def _check_codec(codec: E4M3Codec, seed: int) -> str | None:
    reference = np.array([decode_bits(c) for c in range(256)])
    finite = np.isfinite(reference)
    if finite.sum() != 254 or np.isnan(reference).sum() != 2:
        return "reference codebook must have 254 finite and 2 NaN codes"
    if not np.array_equal(np.isnan(codec.table), np.isnan(reference)):
        return "NaN codes differ from the reference layout"
    bad = np.flatnonzero(finite & (codec.table != reference))
    if bad.size:
        return f"decode mismatch at codes {[hex(int(c)) for c in bad[:4]]}"
    for c in np.flatnonzero(finite):
        back, over = codec.encode(float(reference[c]))
        if back != c or over:
            return f"round trip failed for code {c:#04x}"
    if codec.encode(448.0)[1] or not codec.encode(449.0)[1]:
        return "overflow threshold is not 448"
    x = make_rng(seed).uniform(-500, 500, 10_000)
    x = x[np.abs(x) <= 448]
    got = reference[codec.encode_array(x)[0]]
    pos = reference[finite]
    best = np.abs(x[:, None] - pos[None, :]).min(axis=1)
    if np.any(np.abs(x - got) > best):
        return "encode is not nearest-value"
    return None


def _check_adjoint(seed: int) -> str | None:
    rng = make_rng(seed)
    for _ in range(20):
        m, n = rng.integers(1, 30, size=2)
        A = rng.standard_normal((m, n))
        x, y = rng.standard_normal(n), rng.standard_normal(m)
        if abs(matvec(A, x) @ y - x @ matvec_t(A, y)) > 1e-12 * (1 + np.abs(A).sum()):
            return "matvec adjoint identity violated"
        g, dh, nkv = rng.integers(1, 5, size=3)
        z, yy = rng.standard_normal(nkv * dh), rng.standard_normal(nkv * dh * g)
        if abs(repeat_blocks(z, g, dh) @ yy - z @ sum_groups(yy, g, dh)) > 1e-12 * (1 + np.abs(yy).sum()):
            return "repeat_blocks / sum_groups are not adjoint"
    return None


def _check_gqa(seed: int) -> str | None:
    rng = make_rng(seed)
    for _ in range(10):
        g = int(rng.choice([2, 4, 8]))
        d_h = int(rng.choice([2, 4, 8]))
        n_kv = int(rng.integers(1, 3))
        d = int(rng.integers(16, 65))
        w = AttentionWeights(rng.standard_normal((d, g * n_kv * d_h)) / np.sqrt(d),
                             rng.standard_normal((d, n_kv * d_h)) / np.sqrt(d), d_h, g * n_kv, n_kv)
        s, _, _ = spectral_norm(w, rng, tol=1e-13)
        o = spectral_norm_oracle(interaction_matrix(w))
        if abs(s - o) > 1e-8:
            return f"implicit {s!r} vs explicit {o!r}"
    return None


def _check_tables() -> str | None:
    expected = {"gpt2-xl": (2.98, 0.074, 8), "mistral-7b": (2.26, 0.035, 14),
                "llama2-13b": (2.28, 0.028, 18), "llama2-70b": (2.32, 0.018, 28)}
    target = bounds.CalibrationTarget(1e-6, 1024)
    for name, (g, a, imp) in expected.items():
        r = bounds.calibrate(bounds.reference_dims(name), target)
        if abs(r.gamma - g) > 0.03 or abs(r.alpha_min - a) > 0.001 or round(r.improvement) != imp:
            return f"{name}: gamma={r.gamma:.4f} alpha_min={r.alpha_min:.4f} improvement={r.improvement:.2f}"
        if r.overflow_bound > target.delta_star + 1e-9:
            return f"{name}: overflow bound {r.overflow_bound} exceeds delta*"
    return None


def run_selftest(seed: int = 0, codec: E4M3Codec = E4M3) -> list[CheckResult]:
    checks: list[tuple[str, Callable[[], str | None]]] = [
        ("codec", lambda: _check_codec(codec, seed)),
        ("adjoint", lambda: _check_adjoint(seed)),
        ("gqa-equivalence", lambda: _check_gqa(seed)),
        ("calibration-tables", _check_tables),
    ]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            err = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed run
            err = f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, err is None, err or "ok", time.perf_counter() - t0))
    return out
