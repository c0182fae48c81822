"""Mode-coverage grid on the 256-mode SLCP posterior.

Conventional MH with 1/10/100/1000 chains against ISP (M teacher chains, a
surrogate flow, i.i.d. draws), all scored on ``n`` retained samples with
Missed Mode, Sample Imbalance and the determinant-ratio ESS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import FitConfig
from .isp import draw_inputs, draw_teacher, fit_surrogate
from .mcmc import SamplerConfig, TargetDensity, keyed_rng, sample_chains
from .metrics import ModeSet, effective_sample_size, missed_mode, sample_imbalance
from .simulators import exact_posterior, get_simulator, slcp_posterior_sampler

METRICS = ("missed_mode", "imbalance", "ess")


@dataclass(frozen=True)
class Table1Config:
    n: int = 1000
    chain_grid: tuple = (1, 10, 100, 1000)
    teacher_chains: int = 5000
    teacher_t: int = 500
    step_scale: float = 0.1
    burn_in: int = 500
    thinning: int = 10
    surrogate_val: int | None = None  # None: half of n
    surrogate_max_epochs: int = 200
    obs_seed: int = 0

    @property
    def columns(self) -> list[str]:
        return [f"mh_{m}" for m in self.chain_grid] + [f"isp_{self.teacher_chains}"]


def _setup(obs_seed):
    sim = get_simulator("slcp256", obs_seed=obs_seed)
    target = TargetDensity(exact_posterior(sim), sim.lo, sim.hi)
    reference = slcp_posterior_sampler(sim)(200_000, keyed_rng(obs_seed, 99))
    return sim, target, np.cov(reference, rowvar=False)


def _score(samples, modes, cov):
    return {
        "missed_mode": float(missed_mode(samples, modes)),
        "imbalance": sample_imbalance(samples, modes),
        "ess": effective_sample_size(samples, cov),
    }


def run_seed(cfg: Table1Config, seed: int, setup=None) -> dict:
    """``{column: {metric: value}}`` for one seed."""
    sim, target, cov = setup if setup is not None else _setup(cfg.obs_seed)
    modes = ModeSet.for_simulator(sim)
    out = {}
    for m in cfg.chain_grid:
        scfg = SamplerConfig("mh", cfg.step_scale, burn_in=cfg.burn_in, thinning=cfg.thinning, seed=seed * 1000 + m)
        out[f"mh_{m}"] = _score(sample_chains(target, cfg.n, m, scfg), modes, cov)
    tcfg = SamplerConfig("mh", cfg.step_scale, transitions_t=cfg.teacher_t, seed=seed * 1000 + 7)
    teacher = draw_teacher(target, cfg.teacher_chains, tcfg)
    surrogate = fit_surrogate(teacher, FitConfig(seed=seed, max_epochs=cfg.surrogate_max_epochs), sim.lo, sim.hi,
                              val_size=cfg.surrogate_val or cfg.n // 2)
    draws = draw_inputs(surrogate, cfg.n, sim.lo, sim.hi, keyed_rng(seed, 11))
    out[f"isp_{cfg.teacher_chains}"] = _score(draws, modes, cov)
    return out


def run_table1(cfg: Table1Config, seeds) -> tuple[dict, list]:
    """Per-seed results and the aggregated ``{metric: {column: (mean, sd)}}`` table."""
    setup = _setup(cfg.obs_seed)
    per_seed = [run_seed(cfg, s, setup) for s in seeds]
    table = {}
    for metric in METRICS:
        table[metric] = {}
        for col in cfg.columns:
            vals = np.array([res[col][metric] for res in per_seed])
            table[metric][col] = (float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
    return table, per_seed
