"""Command-line entry point: ``slfi run | diagnose | bench-table1 | sample``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import accel
from .config import ConfigError, load_config
from .flows import flow_from_dict, flow_sample
from .io import comment_line, config_hash, format_value, read_csv, write_csv, write_rows
from .metrics import ModeSet, effective_sample_size, gmm_fit, inception_score, missed_mode, sample_imbalance
from .simulators import SimulatorError, exact_posterior, get_simulator, slcp_posterior_sampler

DIAG_METRICS = ("missed_mode", "imbalance", "ess", "inception")


def _threads(args) -> None:
    n = args.threads if getattr(args, "threads", None) else accel.threads_from_env()
    accel.set_threads(n)


def _fail(msg: str, code: int = 2) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ------------------------------------------------------------------ run


def cmd_run(args) -> int:
    from .orchestrator import run_inference

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    except OSError as exc:
        return _fail(f"cannot read config: {exc}")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.rounds is not None:
        cfg = dataclasses.replace(cfg, rounds=args.rounds)
    try:
        result = run_inference(cfg, args.out, resume=args.resume)
    except Exception as exc:  # noqa: BLE001 - report any failure as one line
        return _fail(str(exc), 1)
    last = result.records[-1].metrics
    shown = ", ".join(f"{k}={last[k]}" for k in ("missed_mode", "nll") if k in last)
    print(f"completed {len(result.records)} rounds in {args.out} ({shown})")
    return 0


# ------------------------------------------------------------------ diagnose


def _reference_cov(sim):
    if sim.name.startswith("slcp-"):
        ref = slcp_posterior_sampler(sim)(200_000, np.random.default_rng(0))
        return np.cov(ref, rowvar=False)
    if sim.tractable:
        rng = np.random.default_rng(0)
        theta = sim.sample_prior(200_000, rng)
        lw = exact_posterior(sim)(theta)
        w = np.exp(lw - lw.max())
        w /= w.sum()
        diff = theta - w @ theta
        return (w[:, None] * diff).T @ diff
    return None


def diagnose(samples: np.ndarray, sim, metrics) -> list[tuple[str, float]]:
    modes = ModeSet.for_simulator(sim)
    rows = []
    for m in metrics:
        if m == "missed_mode":
            rows.append((m, float(missed_mode(samples, modes))))
        elif m == "imbalance":
            rows.append((m, sample_imbalance(samples, modes)))
        elif m == "ess":
            cov = _reference_cov(sim)
            ok = cov is not None and samples.shape[0] > sim.dim_theta
            rows.append((m, effective_sample_size(samples, cov) if ok else math.nan))
        elif m == "inception":
            c = sim.n_modes
            ok = samples.shape[0] >= 10 * c
            rows.append((m, inception_score(samples, gmm_fit(samples, c, 0)) if ok else math.nan))
    return rows


def cmd_diagnose(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in DIAG_METRICS]
    if bad:
        return _fail(f"unknown metrics {bad}; choose from {', '.join(DIAG_METRICS)}")
    try:
        sim = get_simulator(args.simulator, d=args.d, obs_seed=args.obs_seed)
    except SimulatorError as exc:
        return _fail(str(exc))
    cols, data = read_csv(args.samples)
    if data.size == 0:
        data = np.empty((0, sim.dim_theta))
    if data.shape[1] != sim.dim_theta:
        return _fail(f"samples have {data.shape[1]} columns, {sim.name} needs {sim.dim_theta}")
    rows = diagnose(data, sim, metrics)
    note = comment_line(config_hash=config_hash({"cmd": "diagnose", "simulator": sim.name, "metrics": metrics}),
                        seed=args.obs_seed)
    print(note)
    print("metric,value")
    for name, value in rows:
        print(f"{name},{format_value(value)}")
    return 0


# ------------------------------------------------------------------ bench-table1


def cmd_bench_table1(args) -> int:
    from .table1 import METRICS, Table1Config, run_table1

    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = Table1Config(n=args.n, teacher_chains=args.teacher_chains, teacher_t=args.teacher_t)
    try:
        table, per_seed = run_table1(cfg, seeds)
    except Exception as exc:  # noqa: BLE001
        return _fail(str(exc), 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {**dataclasses.asdict(cfg), "seeds": seeds}
    note = comment_line(config_hash=config_hash(doc), seed=",".join(map(str, seeds)))
    header = ["metric"] + [f"{c}_{s}" for c in cfg.columns for s in ("mean", "sd")]
    rows = [[m] + [v for c in cfg.columns for v in table[m][c]] for m in METRICS]
    write_rows(out / "table1.csv", header, rows, note)
    raw = [[s, c, m, res[c][m]] for s, res in zip(seeds, per_seed) for c in cfg.columns for m in METRICS]
    write_rows(out / "table1_seeds.csv", ["seed", "sampler", "metric", "value"], raw, note)
    for m in METRICS:
        print(m.ljust(12) + "  ".join(f"{c}={table[m][c][0]:.3g}" for c in cfg.columns))
    return 0


# ------------------------------------------------------------------ sample


def cmd_sample(args) -> int:
    import json

    try:
        with open(args.checkpoint) as fh:
            model = flow_from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"cannot load checkpoint: {exc}")
    if model.context_dim:
        return _fail("sampling needs an unconditional (surrogate) flow checkpoint")
    if args.n < 0:
        return _fail("--n must be non-negative")
    x, lp = flow_sample(model, args.n, rng=np.random.default_rng(args.seed))
    cols = [f"theta{i}" for i in range(model.dim)] + ["log_prob"]
    note = comment_line(config_hash=config_hash(json.load(open(args.checkpoint))["header"]), seed=args.seed)
    write_csv(args.out, cols, np.hstack([x, lp[:, None]]) if args.n else np.empty((0, len(cols))), note)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slfi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run sequential inference from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--rounds", type=int, help="override the configured number of rounds")
    r.add_argument("--resume", action="store_true", help="continue after the last completed round")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("diagnose", help="score a samples CSV against a simulator's modes")
    d.add_argument("samples")
    d.add_argument("--simulator", required=True)
    d.add_argument("--d", type=int, help="dimension for slcp-d")
    d.add_argument("--metrics", default="missed_mode,imbalance")
    d.add_argument("--obs-seed", type=int, default=0)
    d.add_argument("--threads", type=int)
    d.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("bench-table1", help="MH chains vs ISP on the 256-mode posterior")
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", default="0,1,2,3,4")
    b.add_argument("--n", type=int, default=1000)
    b.add_argument("--teacher-chains", type=int, default=5000)
    b.add_argument("--teacher-t", type=int, default=500)
    b.add_argument("--threads", type=int)
    b.set_defaults(func=cmd_bench_table1)

    s = sub.add_parser("sample", help="draw from a surrogate flow checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _threads(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
