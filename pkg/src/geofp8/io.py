"""On-disk formats: GAWT tensor files, run configs, JSON/CSV reports."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .calibration import AutoAlphaConfig
from .fp8 import ETA_DELAYED, ETA_FP8, HISTORY_LEN
from .harness import ModelConfig, RunReport, Scenario

MAGIC = b"GAWT"
TENSOR_VERSION = 1
REPORT_SCHEMA_VERSION = 1
POLICIES = ("geometry", "delayed", "both", "auto-alpha")

_HEADER = struct.Struct("<4sHH")


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def write_tensor(path: str | Path, array) -> None:
    """Write ``array`` as GAWT: magic, u16 version, u16 ndim, u64 dims, f32 LE payload."""
    a = np.asarray(array)
    header = _HEADER.pack(MAGIC, TENSOR_VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a GAWT file into a float64 array (row-major)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    if len(raw) < off + 8 * ndim:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    n = math.prod(dims)
    if len(raw) - off != 4 * n:
        raise FormatError(f"{path}: payload is {len(raw) - off} bytes, expected {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", offset=off, count=n).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values in payload")
    return data.reshape(dims)


# -- configs -----------------------------------------------------------------

@dataclass(frozen=True)
class ModelSection:
    d: int = 128
    d_h: int = 16
    n_q: int = 4
    n_kv: int = 2
    n_layers: int = 2
    sigma_target: float | list[float] = 20.0
    spectral_decay: float = 0.8
    cold_start_iters: int = 5
    resample_tokens: bool = False


@dataclass(frozen=True)
class TargetSection:
    delta_star: float = 1e-6
    L: int = 64


@dataclass(frozen=True)
class PolicySection:
    mode: str = "both"
    alpha: float | None = None
    eta_fp8: float = ETA_FP8
    eta_delayed: float = ETA_DELAYED
    history_len: int = HISTORY_LEN
    T_calib: int = 100
    q: float = 0.9999
    kappa: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    target: TargetSection = field(default_factory=TargetSection)
    policy: PolicySection = field(default_factory=PolicySection)
    scenario: Scenario = field(default_factory=Scenario)
    seed: int = 0

    def __post_init__(self):
        if self.policy.mode not in POLICIES:
            raise ConfigError(f"policy.mode must be one of {POLICIES}, got {self.policy.mode!r}")
        # building the runtime objects runs their validation
        try:
            self.model_config()
            self.auto_alpha_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        m, t, p = self.model, self.target, self.policy
        sigma = tuple(m.sigma_target) if isinstance(m.sigma_target, list) else m.sigma_target
        return ModelConfig(d=m.d, d_h=m.d_h, n_q=m.n_q, n_kv=m.n_kv, n_layers=m.n_layers, L=t.L,
                           sigma_target=sigma, spectral_decay=m.spectral_decay, alpha=p.alpha,
                           delta_star=t.delta_star, eta_fp8=p.eta_fp8, eta_delayed=p.eta_delayed,
                           history_len=p.history_len, cold_start_iters=m.cold_start_iters,
                           resample_tokens=m.resample_tokens)

    def auto_alpha_config(self) -> AutoAlphaConfig | None:
        if self.policy.mode != "auto-alpha":
            return None
        alpha0 = self.model_config().resolved_alpha()
        return AutoAlphaConfig(alpha0=alpha0, T_calib=self.policy.T_calib, q=self.policy.q,
                               kappa=self.policy.kappa)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    sections = {"model": ModelSection, "target": TargetSection, "policy": PolicySection,
                "scenario": Scenario}
    unknown = set(data) - set(sections) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {name: _build(cls, data.get(name, {}), name) for name, cls in sections.items()}
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(seed=seed, **kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


# -- reports -----------------------------------------------------------------

def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def to_json(kind: str, payload: dict) -> str:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind, **_plain(payload)}
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def run_report_payload(report: RunReport, policy: str = "both") -> dict:
    return {
        "seed": report.seed,
        "policy": policy,
        "geometry_mode": report.geometry_mode,
        "guarantee": "none (empirical auto-alpha)" if report.geometry_mode == "auto-alpha"
                     else "rank-aware union bound",
        "alpha": report.alpha,
        "alpha_final": report.alpha_final,
        "scenario": report.scenario,
        "model": report.model,
        "summary": report.summary,
        "steps": [
            {"step": s.step, "calibrating": s.calibrating, "max_logit": s.max_logit,
             "overflows_geometry": s.overflows_geometry, "overflows_delayed": s.overflows_delayed,
             "layers": s.layers}
            for s in report.steps
        ],
    }


STEP_COLUMNS = ("step", "layer", "calibrating", "max_logit", "sigma_estimate", "alpha",
                "scale_geometry", "scale_delayed", "overflows_geometry", "overflows_delayed",
                "max_scaled_geometry", "max_scaled_delayed", "utilization_geometry",
                "utilization_delayed", "within_calibrated_bound")


def fmt_num(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def steps_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for s in report.steps:
        for lay in s.layers:
            row = {"step": s.step, "calibrating": s.calibrating, **asdict(lay)}
            w.writerow([fmt_num(row[c]) for c in STEP_COLUMNS])
    return buf.getvalue()


def rows_csv(header: tuple[str, ...], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt_num(v) for v in r])
    return buf.getvalue()
