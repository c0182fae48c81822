"""Implicit surrogate proposal: teacher chains, surrogate fit, i.i.d. input draws.

Each round runs ``M`` short chains on the current proposal, keeps the last
state of every chain, and fits a fresh unconditional flow to those states.
The next round's simulation inputs are then drawn from the flow in one
feed-forward pass, with out-of-box draws rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import FitConfig, FlowModel, fit_flow, flow_sample, make_flow
from .mcmc import SamplerConfig, TargetDensity, run_chains


class RejectionCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class TeacherSet:
    samples: np.ndarray
    round: int
    chains: int
    transitions: int
    seed: int
    acceptance: float = float("nan")


def draw_teacher(proposal: TargetDensity, m: int, cfg: SamplerConfig, round_idx: int = 0) -> TeacherSet:
    """``m`` prior-started chains, ``cfg.transitions_t`` steps each, final states kept."""
    run = run_chains(proposal, m, cfg, init="prior")
    return TeacherSet(run.draws, round_idx, m, cfg.transitions_t, cfg.seed, float(run.acceptance_rates.mean()))


def surrogate_tail_bound(teacher: np.ndarray, lo, hi, cap: float = 10.0) -> float:
    """1.2 x the largest standardised box coordinate, capped."""
    shift = teacher.mean(axis=0)
    sd = teacher.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    box = np.abs(np.concatenate([(np.asarray(lo) - shift) / sd, (np.asarray(hi) - shift) / sd]))
    return float(min(1.2 * box.max(), cap))


def fit_surrogate(teacher: TeacherSet | np.ndarray, cfg: FitConfig, lo, hi, *, val_size: int | None = None,
                  tail_bound: float | None = None, **flow_kw) -> FlowModel:
    """Fresh unconditional flow fit by maximum likelihood to the teacher set."""
    samples = teacher.samples if isinstance(teacher, TeacherSet) else np.asarray(teacher, dtype=np.float64)
    if samples.shape[0] < 20:
        raise ValueError(f"surrogate needs at least 20 teacher samples, got {samples.shape[0]}")
    bound = surrogate_tail_bound(samples, lo, hi) if tail_bound is None else tail_bound
    model = make_flow(samples.shape[1], 0, tail_bound=bound, seed=cfg.seed, data=samples, **flow_kw)
    return fit_flow(model, samples, None, cfg, val_size=val_size)


def draw_inputs(surrogate: FlowModel | None, n: int, lo, hi, rng: np.random.Generator, cap_factor: int = 100) -> np.ndarray:
    """``n`` i.i.d. surrogate draws inside the box; ``surrogate=None`` draws from the uniform prior."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if surrogate is None:
        return lo + rng.random((n, lo.size)) * (hi - lo)
    out = []
    have = attempts = 0
    cap = cap_factor * max(n, 1)
    while have < n:
        batch = min(max(2 * (n - have), 64), cap - attempts)
        if batch <= 0:
            raise RejectionCapError(
                f"only {have} of {n} surrogate draws fell inside the prior box after {attempts} attempts"
            )
        x, _ = flow_sample(surrogate, batch, rng=rng)
        attempts += batch
        ok = x[np.all((x >= lo) & (x <= hi), axis=1)]
        out.append(ok)
        have += ok.shape[0]
    return np.vstack(out)[:n]
