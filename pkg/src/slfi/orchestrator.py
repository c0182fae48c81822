"""Sequential rounds: draw inputs, simulate, accumulate, refit the head, rebuild the sampler.

Run directory layout::

    out/config.yaml              resolved config (defaults filled in)
    out/summary.csv              every round's metrics, rewritten after each round
    out/round_01/inputs.csv      theta simulated this round
    out/round_01/outputs.csv     simulator outputs for those inputs
    out/round_01/head.json       trained head checkpoint
    out/round_01/teacher.csv     ISP only: final chain states
    out/round_01/surrogate.json  ISP only: surrogate flow
    out/round_01/next_inputs.csv inputs for the following round
    out/round_01/metrics.csv     metrics of this round
    out/round_01/timing.json     wall-clock per phase (kept out of the CSVs)
    out/round_01/COMPLETE        written last; marks the round as resumable
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_dict, dump_config, load_config
from .flows import FlowModel, load_flow, save_flow
from .inference import (
    Head,
    JointDataset,
    load_head,
    make_classifier,
    posterior_log_prob_at_truth,
    proposal_density,
    save_head,
    train_aalr,
    train_snl,
)
from .io import comment_line, config_hash, read_csv, read_table, write_csv, write_rows
from .isp import draw_inputs, draw_teacher, fit_surrogate
from .mcmc import keyed_rng, sample_chains
from .metrics import ModeSet, effective_sample_size, gmm_fit, inception_score, missed_mode, sample_imbalance
from .simulators import Simulator, get_simulator, simulate

log = logging.getLogger(__name__)

# per-round stream tags
_T_INPUT, _T_SIM, _T_HEAD, _T_TEACHER, _T_SURR, _T_DRAW, _T_METRIC, _T_GMM = range(8)
METRIC_COLUMNS = ["run_id", "round", "metric", "value", "stderr"]


def round_seed(master: int, round_idx: int, tag: int) -> int:
    """Counter-based seed: a pure function of (master seed, round, phase)."""
    return int(np.random.SeedSequence([master, round_idx, tag]).generate_state(1, np.uint64)[0] >> 1)


def round_rng(master: int, round_idx: int, tag: int) -> np.random.Generator:
    return keyed_rng(master, round_idx, tag)


@dataclass
class RoundRecord:
    round: int
    metrics: dict
    stderr: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)


@dataclass
class RunState:
    completed: int
    data: JointDataset
    head: Head | None = None
    surrogate: FlowModel | None = None
    next_inputs: np.ndarray | None = None
    sim_calls: int = 0


@dataclass
class RunResult:
    config: RunConfig
    records: list
    state: RunState
    out_dir: Path | None = None


def build_simulator(cfg: RunConfig) -> Simulator:
    opts = dict(cfg.simulator_options)
    d = opts.pop("d", None)
    return get_simulator(cfg.simulator, d=d, obs_seed=cfg.obs_seed, **opts)


def run_id(cfg: RunConfig) -> str:
    return f"{config_hash(config_to_dict(cfg))}-s{cfg.seed}"


def initial_state(cfg: RunConfig, sim: Simulator) -> RunState:
    return RunState(0, JointDataset.empty(sim.dim_theta, sim.dim_x))


# ------------------------------------------------------------------ metrics


def _weighted_cov(proposal, n, rng):
    theta = proposal.lo + rng.random((n, proposal.dim)) * (proposal.hi - proposal.lo)
    lw = proposal(theta)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    mean = w @ theta
    diff = theta - mean
    return (w[:, None] * diff).T @ diff


def round_metrics(cfg: RunConfig, sim: Simulator, state: RunState, r: int, samples: np.ndarray):
    values, errs = {}, {}
    modes = ModeSet.for_simulator(sim)
    names = cfg.metrics.names
    if "missed_mode" in names:
        values["missed_mode"] = missed_mode(samples, modes)
    if "imbalance" in names:
        values["imbalance"] = sample_imbalance(samples, modes)
    proposal = proposal_density(state.head, sim)
    if "nll" in names and state.head is not None:
        surrogate = state.surrogate if cfg.metrics.normalizer == "surrogate" else None
        score = posterior_log_prob_at_truth(state.head, sim, cfg.metrics.n_mc, round_rng(cfg.seed, r, _T_METRIC),
                                            surrogate=surrogate)
        values["nll"] = score.value
        errs["nll"] = score.stderr
    if "ess" in names:
        cov = _weighted_cov(proposal, cfg.metrics.n_mc, round_rng(cfg.seed, r, _T_METRIC + 100))
        try:
            values["ess"] = effective_sample_size(samples, cov)
        except ValueError:
            values["ess"] = math.nan
    if "inception" in names:
        c = sim.n_modes
        if samples.shape[0] >= 10 * c:
            values["inception"] = inception_score(samples, gmm_fit(samples, c, round_seed(cfg.seed, r, _T_GMM)))
        else:
            values["inception"] = math.nan
    return values, errs


# ------------------------------------------------------------------ rounds


def _train_head(cfg: RunConfig, state: RunState, r: int):
    fit = cfg.head_fit.fit_config(round_seed(cfg.seed, r, _T_HEAD))
    init = state.head if cfg.warm_start else None
    if cfg.head == "snl":
        fk = dict(n_layers=cfg.flow.layers, n_bins=cfg.flow.bins, hidden_dims=cfg.flow.hidden,
                  activation=cfg.flow.activation, tail_bound=cfg.flow.head_tail_bound)
        return train_snl(state.data, fit, init=init, **fk)
    if init is None:
        init = make_classifier(state.data.theta.shape[1], state.data.x.shape[1], state.data,
                               hidden=cfg.classifier.hidden, activation=cfg.classifier.activation, seed=fit.seed)
    return train_aalr(state.data, fit, init=init)


def run_round(state: RunState, cfg: RunConfig, sim: Simulator, out_dir: Path | None = None):
    """Advance one round; returns the new state and its record."""
    r = state.completed + 1
    timing = {}
    n = cfg.budget

    t0 = time.perf_counter()
    if state.next_inputs is None:
        theta = draw_inputs(None, n, sim.lo, sim.hi, round_rng(cfg.seed, r, _T_INPUT))
    else:
        theta = state.next_inputs
    timing["draw_input"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    x = simulate(sim, theta, round_rng(cfg.seed, r, _T_SIM))
    data = state.data.append(theta, x, r)
    timing["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    head = _train_head(cfg, RunState(state.completed, data, state.head), r)
    timing["improve_inference"] = time.perf_counter() - t0

    proposal = proposal_density(head, sim)
    teacher = surrogate = None
    s_cfg = cfg.sampler.sampler_config(round_seed(cfg.seed, r, _T_TEACHER))
    t0 = time.perf_counter()
    if cfg.sampler.kind == "isp":
        teacher = draw_teacher(proposal, cfg.sampler.chains, s_cfg, r)
        timing["draw_teacher"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        fit = cfg.surrogate_fit.fit_config(round_seed(cfg.seed, r, _T_SURR))
        surrogate = fit_surrogate(
            teacher, fit, sim.lo, sim.hi, val_size=cfg.surrogate_val, tail_bound=cfg.flow.surrogate_tail_bound,
            n_layers=cfg.flow.layers, n_bins=cfg.flow.bins, hidden_dims=cfg.flow.hidden,
            activation=cfg.flow.activation,
        )
        next_inputs = draw_inputs(surrogate, n, sim.lo, sim.hi, round_rng(cfg.seed, r, _T_DRAW))
        timing["surrogate"] = time.perf_counter() - t0
    else:
        next_inputs = sample_chains(proposal, n, cfg.sampler.chains, s_cfg, init="prior")
        timing["mcmc_inputs"] = time.perf_counter() - t0

    new_state = RunState(r, data, head, surrogate, next_inputs, state.sim_calls + theta.shape[0])
    t0 = time.perf_counter()
    values, errs = round_metrics(cfg, sim, new_state, r, next_inputs)
    timing["metrics"] = time.perf_counter() - t0

    values["sim_calls"] = theta.shape[0]
    values["dataset_size"] = len(data)
    values["head_epochs"] = len(head.history)
    if head.history:
        values["head_val_loss"] = min(v for _, v in head.history)
    if teacher is not None:
        values["teacher_acceptance"] = teacher.acceptance
        values["surrogate_epochs"] = len(surrogate.history)
    record = RoundRecord(r, values, errs, timing)

    if out_dir is not None:
        record.paths = _persist_round(out_dir, cfg, record, theta, x, head, teacher, surrogate, next_inputs)
    log.info("round %d done: %s", r, {k: values[k] for k in ("missed_mode", "nll") if k in values})
    return new_state, record


# ------------------------------------------------------------------ persistence


def _round_dir(out_dir: Path, r: int) -> Path:
    return Path(out_dir) / f"round_{r:02d}"


def _metric_rows(cfg: RunConfig, record: RoundRecord):
    rid = run_id(cfg)
    return [[rid, record.round, k, v, record.stderr.get(k, math.nan)] for k, v in record.metrics.items()]


def _persist_round(out_dir, cfg, record, theta, x, head, teacher, surrogate, next_inputs):
    d = _round_dir(out_dir, record.round)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    note = comment_line(config_hash=config_hash(config_to_dict(cfg)), seed=cfg.seed, round=record.round)
    th_cols = [f"theta{i}" for i in range(theta.shape[1])]
    paths = {}
    write_csv(d / "inputs.csv", th_cols, theta, note)
    write_csv(d / "outputs.csv", [f"x{i}" for i in range(x.shape[1])], x, note)
    save_head(head, d / "head.json")
    paths.update(inputs=str(d / "inputs.csv"), outputs=str(d / "outputs.csv"), head=str(d / "head.json"))
    if teacher is not None:
        write_csv(d / "teacher.csv", th_cols, teacher.samples, note)
        save_flow(surrogate, d / "surrogate.json")
        paths.update(teacher=str(d / "teacher.csv"), surrogate=str(d / "surrogate.json"))
    write_csv(d / "next_inputs.csv", th_cols, next_inputs, note)
    write_rows(d / "metrics.csv", METRIC_COLUMNS, _metric_rows(cfg, record), note)
    (d / "timing.json").write_text(json.dumps(record.timing, indent=1))
    (d / "COMPLETE").write_text("")
    return paths


def _write_summary(out_dir: Path, cfg: RunConfig, records) -> None:
    rows = [row for rec in records for row in _metric_rows(cfg, rec)]
    note = comment_line(config_hash=config_hash(config_to_dict(cfg)), seed=cfg.seed)
    write_rows(Path(out_dir) / "summary.csv", METRIC_COLUMNS, rows, note)


def completed_rounds(out_dir: Path) -> int:
    r = 0
    while (_round_dir(out_dir, r + 1) / "COMPLETE").exists():
        r += 1
    return r


def _load_record(out_dir: Path, r: int) -> RoundRecord:
    d = _round_dir(out_dir, r)
    values, errs = {}, {}
    for row in read_table(d / "metrics.csv"):
        v = math.nan if row["value"] == "NA" else float(row["value"])
        values[row["metric"]] = int(v) if row["metric"] in ("missed_mode", "sim_calls", "dataset_size",
                                                            "head_epochs", "surrogate_epochs") else v
        if row["stderr"] != "NA":
            errs[row["metric"]] = float(row["stderr"])
    timing = json.loads((d / "timing.json").read_text())
    return RoundRecord(r, values, errs, timing)


def load_state(out_dir: Path, cfg: RunConfig, sim: Simulator, upto: int) -> tuple[RunState, list]:
    state = initial_state(cfg, sim)
    data = state.data
    for r in range(1, upto + 1):
        d = _round_dir(out_dir, r)
        data = data.append(read_csv(d / "inputs.csv")[1], read_csv(d / "outputs.csv")[1], r)
    d = _round_dir(out_dir, upto)
    head = load_head(d / "head.json")
    surrogate = load_flow(d / "surrogate.json") if (d / "surrogate.json").exists() else None
    next_inputs = read_csv(d / "next_inputs.csv")[1]
    records = [_load_record(out_dir, r) for r in range(1, upto + 1)]
    return RunState(upto, data, head, surrogate, next_inputs, len(data)), records


# ------------------------------------------------------------------ driver


def run_inference(cfg: RunConfig, out_dir=None, *, resume: bool = False) -> RunResult:
    """Run ``cfg.rounds`` rounds, writing artifacts under ``out_dir`` when given."""
    cfg.validate()
    sim = build_simulator(cfg)
    state, records = initial_state(cfg, sim), []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = out_dir / "config.yaml"
        done = completed_rounds(out_dir)
        if resume and done:
            previous = load_config(snapshot)
            if config_to_dict(previous) != config_to_dict(cfg):
                raise ValueError("cannot resume: config differs from the one stored in the run directory")
            state, records = load_state(out_dir, cfg, sim, min(done, cfg.rounds))
        else:
            for old in out_dir.glob("round_*"):
                shutil.rmtree(old)
            (out_dir / "summary.csv").unlink(missing_ok=True)
        snapshot.write_text(dump_config(cfg))
    while state.completed < cfg.rounds:
        try:
            state, rec = run_round(state, cfg, sim, out_dir)
        except Exception as exc:
            raise RuntimeError(f"round {state.completed + 1} failed: {exc}") from exc
        records.append(rec)
        if out_dir is not None:
            _write_summary(out_dir, cfg, records)
    return RunResult(cfg, records, state, out_dir)
