"""Command-line entry point: ``geofp8 {calibrate,spectral,simulate,montecarlo,selftest}``.

Exit codes: 0 success (overflows in a simulation are results, not errors),
1 self-test failure, 2 invalid input or I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import bounds, harness
from .io import (
    POLICIES,
    ConfigError,
    FormatError,
    RunConfig,
    load_config,
    read_tensor,
    rows_csv,
    run_report_payload,
    steps_csv,
    to_json,
)
from .linalg import make_rng, spectral_norm_oracle
from .selftest import corrupted_codec, run_selftest
from .spectral import AttentionWeights, cold_start, converge, interaction_matrix


class UsageError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- calibrate -----------------------------------------------------------------

def _calibration_payload(name: str | None, dims: bounds.ModelDims, target: bounds.CalibrationTarget,
                         split: float) -> dict:
    r = bounds.calibrate(dims, target, split=split)
    return {
        "model": name,
        "d": dims.d, "d_h": dims.d_h, "n_layers": dims.n_layers, "n_heads": dims.n_heads, "N": dims.N,
        "delta_star": target.delta_star, "L": target.L, "split": split,
        "gamma": r.gamma, "alpha_min": r.alpha_min, "T1": r.T1, "T2": r.T2,
        "improvement": r.improvement, "improvement_rounded": round(r.improvement),
        "overflow_bound": r.overflow_bound,
    }


def cmd_calibrate(args) -> int:
    try:
        target = bounds.CalibrationTarget(args.delta_star, args.seq_len)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.all:
        rows = [(n, bounds.reference_dims(n)) for n in bounds.REFERENCE_MODELS]
    elif args.model:
        if args.model not in bounds.REFERENCE_MODELS:
            raise UsageError(f"unknown model {args.model!r}; known: {sorted(bounds.REFERENCE_MODELS)}")
        rows = [(args.model, bounds.reference_dims(args.model))]
    else:
        if None in (args.d, args.d_h, args.n_layers, args.n_heads):
            raise UsageError("give --model, --all, or all of --d --d-h --n-layers --n-heads")
        try:
            rows = [(None, bounds.ModelDims(args.d, args.d_h, args.n_layers, args.n_heads))]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    try:
        results = [_calibration_payload(n, dims, target, args.split) for n, dims in rows]
    except (bounds.InfeasibleTargetError, ValueError) as exc:
        raise UsageError(f"calibration infeasible: {exc}") from exc

    if args.format == "csv":
        header = tuple(results[0])
        _emit(rows_csv(header, [tuple(r.values()) for r in results]), args.out)
    else:
        payload = {"results": results} if len(results) > 1 or args.all else results[0]
        _emit(to_json("calibration", payload), args.out)
    return 0


# -- spectral ------------------------------------------------------------------

def _load_layer(wq_path: str, wk_path: str, d_h: int, n_q: int | None, n_kv: int | None) -> AttentionWeights:
    Wq, Wk = read_tensor(wq_path), read_tensor(wk_path)
    for p, a in ((wq_path, Wq), (wk_path, Wk)):
        if a.ndim != 2:
            raise FormatError(f"{p}: expected a 2-D tensor, got {a.ndim}-D")
    if Wq.shape[1] % d_h or Wk.shape[1] % d_h:
        raise FormatError(f"{wq_path}/{wk_path}: column counts not divisible by d_h={d_h}")
    nq = n_q or Wq.shape[1] // d_h
    nkv = n_kv or Wk.shape[1] // d_h
    try:
        return AttentionWeights(Wq, Wk, d_h, nq, nkv)
    except ValueError as exc:
        raise FormatError(f"{wq_path}/{wk_path}: {exc}") from exc


def cmd_spectral(args) -> int:
    layers = [_load_layer(q, k, args.d_h, args.n_q, args.n_kv) for q, k in (args.layer or [])]
    header = ["layer"] + (["head"] if args.per_head else []) + ["sigma", "iters", "converged"]
    if args.check_explicit:
        header += ["sigma_explicit", "abs_diff"]
    rows = []
    for i, w in enumerate(layers):
        targets = [(h, w.head(h)) for h in range(w.n_q)] if args.per_head else [(None, w)]
        for h, ww in targets:
            s = cold_start(ww, make_rng(args.seed + i))
            s, ok = converge(ww, s, tol=args.tol)
            row = [i] + ([h] if args.per_head else []) + [s.sigma, s.steps_run, ok]
            if args.check_explicit:
                ex = spectral_norm_oracle(interaction_matrix(ww))
                row += [ex, abs(ex - s.sigma)]
            rows.append(row)
    if args.format == "json":
        _emit(to_json("spectral", {"seed": args.seed, "rows": [dict(zip(header, r)) for r in rows]}), args.out)
    else:
        _emit(rows_csv(tuple(header), rows), args.out)
    return 0


# -- simulate ------------------------------------------------------------------

def _simulate_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    sc_over = {k: v for k, v in {
        "kind": args.scenario, "spike_factor": args.spike_factor,
        "steps_before": args.steps_before, "steps_after": args.steps_after,
    }.items() if v is not None}
    pol_over = {k: v for k, v in {"alpha": args.alpha, "mode": args.policy}.items() if v is not None}
    tgt_over = {k: v for k, v in {"delta_star": args.delta_star, "L": args.seq_len}.items() if v is not None}
    try:
        return dataclasses.replace(
            cfg,
            scenario=dataclasses.replace(cfg.scenario, **sc_over),
            policy=dataclasses.replace(cfg.policy, **pol_over),
            target=dataclasses.replace(cfg.target, **tgt_over),
            seed=cfg.seed if args.seed is None else args.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args) -> int:
    cfg = _simulate_config(args)
    report = harness.run_scenario(cfg.scenario, cfg.model_config(), cfg.seed, cfg.auto_alpha_config())
    if args.csv:
        Path(args.csv).write_text(steps_csv(report), encoding="utf-8")
    if args.format == "csv":
        _emit(steps_csv(report), args.out)
    else:
        _emit(to_json("run", run_report_payload(report, cfg.policy.mode)), args.out)
    return 0


# -- montecarlo ----------------------------------------------------------------

def cmd_montecarlo(args) -> int:
    if args.which == "projection":
        if not 1 <= args.k <= args.d or args.trials < 1000:
            raise UsageError("need 1 <= k <= d and trials >= 1000")
        rep = harness.monte_carlo_projection(args.d, args.k, args.trials, args.seed,
                                             gammas=args.gamma or (1.5, 2.0, 3.0), workers=args.threads)
        payload = dataclasses.asdict(rep) | {"mean_within_3se": rep.mean_within_3se,
                                              "tails_within_bound": rep.tails_within_bound}
        _emit(to_json("mc-projection", payload), args.out)
        return 0

    dims = bounds.ModelDims(args.d, args.d_h, 1, 1)
    target = bounds.CalibrationTarget(args.delta_star, args.seq_len)
    gamma = args.gamma[0] if args.gamma else bounds.solve_gamma(dims, target)
    a_min = bounds.alpha_min(dims, target, gamma)
    alphas = args.alpha or [a_min / 2, a_min, 2 * a_min]
    if any(a <= 0 for a in alphas) or gamma <= 1:
        raise UsageError("alpha must be positive and gamma > 1")
    rep = harness.monte_carlo_overflow(args.d, args.d_h, args.seq_len, gamma, alphas, args.trials,
                                       args.seed, args.spectrum, workers=args.threads)
    payload = dataclasses.asdict(rep) | {
        "alpha_min": a_min,
        "cells": [dataclasses.asdict(c) | {"bound": c.bound, "within_bound": c.within_bound} for c in rep.cells],
    }
    _emit(to_json("mc-overflow", payload), args.out)
    return 0


# -- selftest ------------------------------------------------------------------

def cmd_selftest(args) -> int:
    codec = corrupted_codec() if args.inject_fault == "codec" else None
    results = run_selftest(args.seed, codec) if codec else run_selftest(args.seed)
    for r in results:
        line = f"{'PASS' if r.ok else 'FAIL'} {r.name} ({r.seconds:.2f}s): {r.detail}"
        print(line, file=sys.stdout if r.ok else sys.stderr)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geofp8", description="Geometry-aware FP8 scale calibration for attention.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="solve gamma and alpha_min for a model/target")
    c.add_argument("--model", help=f"reference model: {', '.join(bounds.REFERENCE_MODELS)}")
    c.add_argument("--all", action="store_true", help="all reference models")
    c.add_argument("--d", type=int)
    c.add_argument("--d-h", type=int)
    c.add_argument("--n-layers", type=int)
    c.add_argument("--n-heads", type=int)
    c.add_argument("--delta-star", type=float, default=1e-6)
    c.add_argument("--seq-len", type=int, default=1024)
    c.add_argument("--split", type=float, default=0.5, help="share of delta* given to the T1 term")
    c.add_argument("--format", choices=("json", "csv"), default="json")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("spectral", help="per-layer ||Wq Wk^T||_2 from GAWT weight files")
    s.add_argument("--layer", nargs=2, action="append", metavar=("WQ", "WK"))
    s.add_argument("--d-h", type=int, required=True)
    s.add_argument("--n-q", type=int)
    s.add_argument("--n-kv", type=int)
    s.add_argument("--per-head", action="store_true", help="one row per query head")
    s.add_argument("--check-explicit", action="store_true", help="also compute the expanded-matrix oracle")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_spectral)

    m = sub.add_parser("simulate", help="run a transient scenario with both scale policies")
    m.add_argument("--config")
    m.add_argument("--scenario", choices=harness.SCENARIO_KINDS)
    m.add_argument("--spike-factor", type=float)
    m.add_argument("--steps-before", type=int)
    m.add_argument("--steps-after", type=int)
    m.add_argument("--alpha", type=float)
    m.add_argument("--delta-star", type=float)
    m.add_argument("--seq-len", type=int)
    m.add_argument("--policy", choices=POLICIES)
    m.add_argument("--seed", type=int)
    m.add_argument("--format", choices=("json", "csv"), default="json")
    m.add_argument("--out")
    m.add_argument("--csv", help="also write the per-step CSV log here")
    m.set_defaults(func=cmd_simulate)

    mc = sub.add_parser("montecarlo", help="Monte-Carlo validation of the tail bounds")
    mc.add_argument("which", choices=("projection", "overflow"))
    mc.add_argument("--d", type=int, default=1600)
    mc.add_argument("--k", type=int, default=64)
    mc.add_argument("--d-h", type=int, default=8)
    mc.add_argument("--seq-len", type=int, default=64)
    mc.add_argument("--delta-star", type=float, default=1e-6)
    mc.add_argument("--gamma", type=float, action="append")
    mc.add_argument("--alpha", type=float, action="append")
    mc.add_argument("--spectrum", choices=("gaussian", "flat"), default="gaussian")
    mc.add_argument("--trials", type=int, default=None)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--threads", type=int, default=1)
    mc.add_argument("--out")
    mc.set_defaults(func=cmd_montecarlo)

    t = sub.add_parser("selftest", help="codec, adjoint, GQA and calibration checks")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--inject-fault", choices=("codec",), help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "montecarlo" and args.trials is None:
        args.trials = 100_000 if args.which == "projection" else 1000
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"geofp8 {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
