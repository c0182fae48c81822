"""Random-walk Metropolis-Hastings and slice sampling over box-supported targets.

Chains are advanced together as an ``(M, d)`` array so that one vectorised
target call serves every chain. Randomness is counter-based: each block of
steps draws from generators keyed by ``(seed, block, tag)`` into chain-major
arrays, so chain ``j`` reads the same numbers whatever ``M`` is. A chain's
path depends only on the seed and its index, never on the number of chains,
processing order or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# stream tags
_INIT, _MH_PROP, _MH_ACC, _SL_HEIGHT, _SL_POS, _SL_SPLIT, _SL_SHRINK = range(7)


class MCMCError(RuntimeError):
    pass


def keyed_rng(*key: int) -> np.random.Generator:
    """Generator whose stream is a pure function of the integer key."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalised log-density on the box ``[lo, hi]``.

    ``log_density`` maps an ``(n, d)`` array to ``n`` values. Points outside the
    box are never passed to it; they get ``-inf`` here.
    """

    log_density: Callable[[np.ndarray], np.ndarray]
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("support box needs lo < hi with matching shapes")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @classmethod
    def from_pointwise(cls, fn: Callable[[np.ndarray], float], lo, hi) -> "TargetDensity":
        def batched(theta):
            return np.array([fn(t) for t in theta], dtype=np.float64)

        return cls(batched, lo, hi)

    def inside(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.lo) & (theta <= self.hi), axis=1)

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        single = theta.ndim == 1
        theta = np.atleast_2d(theta)
        if theta.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {theta.shape[1]}")
        out = np.full(theta.shape[0], -np.inf)
        ok = self.inside(theta)
        if ok.any():
            vals = np.asarray(self.log_density(theta[ok]), dtype=np.float64).reshape(-1)
            if np.isnan(vals).any():
                bad = theta[ok][np.isnan(vals)][0]
                raise MCMCError(f"target returned NaN inside the support at {bad.tolist()}")
            out[ok] = vals
        return out[0] if single else out


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "mh"
    mh_step_scale: float | tuple | None = None  # None: 0.1 * box width
    slice_initial_width: float | None = None  # None: 0.5 * box width
    slice_max_stepout: int = 10
    transitions_t: int = 100
    burn_in: int = 200
    thinning: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mh", "slice"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.transitions_t < 0 or self.burn_in < 0 or self.thinning < 1:
            raise ValueError("transitions_t, burn_in >= 0 and thinning >= 1 required")
        if self.slice_max_stepout < 0:
            raise ValueError("slice_max_stepout must be >= 0")
        if self.mh_step_scale is not None and np.any(np.asarray(self.mh_step_scale) <= 0):
            raise ValueError("mh_step_scale must be positive")
        if self.slice_initial_width is not None and self.slice_initial_width <= 0:
            raise ValueError("slice_initial_width must be positive")

    def step_scale(self, target: TargetDensity) -> np.ndarray:
        if self.mh_step_scale is None:
            return 0.1 * (target.hi - target.lo)
        return np.broadcast_to(np.asarray(self.mh_step_scale, dtype=np.float64), (target.dim,)).copy()

    def slice_width(self, target: TargetDensity) -> np.ndarray:
        if self.slice_initial_width is None:
            return 0.5 * (target.hi - target.lo)
        return np.full(target.dim, float(self.slice_initial_width))


@dataclass
class MultiChainRun:
    draws: np.ndarray  # (M, d): final state of every chain
    acceptance_rates: np.ndarray  # (M,)
    init: np.ndarray = field(repr=False)
    transitions: int = 0
    seed: int = 0

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]


def _check_inside(states, target):
    if not np.all(target.inside(states)):
        raise MCMCError("chain state lies outside the support box")


# --------------------------------------------------------------- streams

_BLOCK = 16  # steps per generator
_SHRINK_POOL = 4  # pre-drawn shrinkage proposals per coordinate per step


class _StepNumbers:
    """Per-step random arrays, generated in blocks of ``_BLOCK`` steps.

    Arrays are laid out chain-major, ``(M, _BLOCK, ...)``, so chain ``j``
    always reads the same numbers whatever ``M`` is.
    """

    def __init__(self, seed, m, d, kind):
        self.seed, self.m, self.d, self.kind = seed, m, d, kind
        self._block = -1

    def _fill(self, block):
        m, d = self.m, self.d
        if self.kind == "mh":
            self.normal = keyed_rng(self.seed, block, _MH_PROP).standard_normal((m, _BLOCK, d))
            self.accept = keyed_rng(self.seed, block, _MH_ACC).random((m, _BLOCK))
        else:
            self.height = keyed_rng(self.seed, block, _SL_HEIGHT).random((m, _BLOCK, d))
            self.pos = keyed_rng(self.seed, block, _SL_POS).random((m, _BLOCK, d))
            self.split = keyed_rng(self.seed, block, _SL_SPLIT).random((m, _BLOCK, d))
            self.shrink = keyed_rng(self.seed, block, _SL_SHRINK).random((m, _BLOCK, d, _SHRINK_POOL))
        self._block = block

    def at(self, step):
        block, b = divmod(step, _BLOCK)
        if block != self._block:
            self._fill(block)
        return b


# --------------------------------------------------------------- MH


def _mh_step(states, logp, target, scale, nums, step):
    b = nums.at(step)
    prop = states + nums.normal[:, b, :] * scale
    lp = target(prop)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.log(nums.accept[:, b]) < lp - logp
    acc &= np.isfinite(lp)
    states = np.where(acc[:, None], prop, states)
    logp = np.where(acc, lp, logp)
    return states, logp, acc


def mh_transition(state, target: TargetDensity, scale, rng: np.random.Generator):
    """One Gaussian random-walk step for a single state; returns ``(new_state, accepted)``."""
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    if not target.inside(state)[0]:
        raise MCMCError("state lies outside the support box")
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), state.shape)
    prop = state + scale * rng.standard_normal(state.size)
    lp_new = target(prop)
    if not np.isfinite(lp_new):
        return state.copy(), False
    if np.log(rng.random()) < lp_new - target(state):
        return prop, True
    return state.copy(), False


# --------------------------------------------------------------- slice


def _slice_coord(states, logp, target, k, width, max_steps, nums, step):
    """Stepping-out then shrinkage update of coordinate ``k`` for every chain."""
    b = nums.at(step)
    m = states.shape[0]
    lo_k, hi_k = target.lo[k], target.hi[k]
    x0 = states[:, k].copy()
    with np.errstate(divide="ignore"):
        level = logp + np.log(nums.height[:, b, k])
    left = x0 - width * nums.pos[:, b, k]
    right = left + width
    j_left = np.floor(max_steps * nums.split[:, b, k]).astype(np.int64)
    j_right = np.maximum(max_steps - 1 - j_left, 0)
    left = np.maximum(left, lo_k)
    right = np.minimum(right, hi_k)
    pool = nums.shrink[:, b, k, :]

    def logp_at(idx, xk):
        pts = states[idx].copy()
        pts[:, k] = xk
        return target(pts)

    for edge, steps, sign, bound in ((left, j_left, -1.0, lo_k), (right, j_right, 1.0, hi_k)):
        active = np.nonzero((steps > 0) & (edge != bound))[0]
        while active.size:
            inside = logp_at(active, edge[active]) > level[active]
            active = active[inside]
            if not active.size:
                break
            edge[active] = np.clip(edge[active] + sign * width, lo_k, hi_k)
            steps[active] -= 1
            active = active[(steps[active] > 0) & (edge[active] != bound)]

    new = x0.copy()
    new_lp = logp.copy()
    pending = np.arange(m)
    it = 0
    while pending.size:
        if it < _SHRINK_POOL:
            u = pool[pending, it]
        else:
            u = keyed_rng(nums.seed, step, k, _SL_SHRINK, it).random(m)[pending]
        cand = left[pending] + u * (right[pending] - left[pending])
        lp = logp_at(pending, cand)
        ok = lp > level[pending]
        new[pending[ok]] = cand[ok]
        new_lp[pending[ok]] = lp[ok]
        bad = pending[~ok]
        cb = cand[~ok]
        below = cb < x0[bad]
        left[bad[below]] = cb[below]
        right[bad[~below]] = cb[~below]
        pending = bad
        it += 1
        if it > 200:
            # interval collapsed onto x0 in floating point; keep the current value
            break
    states = states.copy()
    states[:, k] = new
    return states, new_lp


def _slice_step(states, logp, target, width, max_steps, nums, step):
    for k in range(target.dim):
        states, logp = _slice_coord(states, logp, target, k, width[k], max_steps, nums, step)
    return states, logp


def slice_transition(state, target: TargetDensity, cfg: SamplerConfig, rng: np.random.Generator):
    """One axis-aligned slice sweep for a single state."""
    state = np.asarray(state, dtype=np.float64).reshape(1, -1)
    _check_inside(state, target)
    nums = _StepNumbers(int(rng.integers(0, 2**63 - 1)), 1, target.dim, "slice")
    new, _ = _slice_step(state, target(state), target, cfg.slice_width(target), cfg.slice_max_stepout, nums, 0)
    return new[0]


# --------------------------------------------------------------- runners


def prior_init(target: TargetDensity, m: int, seed: int) -> np.ndarray:
    u = keyed_rng(seed, _INIT).random((m, target.dim))
    return target.lo + u * (target.hi - target.lo)


class _Chains:
    """Vectorised chain state advanced one transition at a time."""

    def __init__(self, target, cfg, init):
        self.target = target
        self.cfg = cfg
        self.states = np.array(init, dtype=np.float64)
        _check_inside(self.states, target)
        self.logp = target(self.states)
        if not np.all(np.isfinite(self.logp)):
            raise MCMCError("initial state has zero target density")
        self.accepted = np.zeros(self.states.shape[0])
        self.steps = 0
        self._scale = cfg.step_scale(target)
        self._width = cfg.slice_width(target)
        self._nums = _StepNumbers(cfg.seed, self.states.shape[0], target.dim, cfg.kind)

    def advance(self):
        if self.cfg.kind == "mh":
            self.states, self.logp, acc = _mh_step(
                self.states, self.logp, self.target, self._scale, self._nums, self.steps
            )
            self.accepted += acc
        else:
            old = self.states
            self.states, self.logp = _slice_step(
                self.states, self.logp, self.target, self._width, self.cfg.slice_max_stepout,
                self._nums, self.steps,
            )
            self.accepted += np.any(self.states != old, axis=1)
        self.steps += 1

    def rates(self):
        return self.accepted / max(self.steps, 1)


def _resolve_init(target, m, cfg, init):
    if init is None or (isinstance(init, str) and init == "prior"):
        return prior_init(target, m, cfg.seed)
    init = np.atleast_2d(np.asarray(init, dtype=np.float64))
    if init.shape != (m, target.dim):
        raise ValueError(f"init must have shape ({m}, {target.dim})")
    return init


def run_chains(target: TargetDensity, m: int, cfg: SamplerConfig, init=None) -> MultiChainRun:
    """Run ``m`` independent chains for ``cfg.transitions_t`` steps and keep each final state."""
    if m < 1:
        raise ValueError("need at least one chain")
    start = _resolve_init(target, m, cfg, init)
    chains = _Chains(target, cfg, start)
    for _ in range(cfg.transitions_t):
        chains.advance()
    return MultiChainRun(chains.states.copy(), chains.rates(), start, cfg.transitions_t, cfg.seed)


def sample_chains(target: TargetDensity, n: int, m: int, cfg: SamplerConfig, init=None) -> np.ndarray:
    """Conventional multi-chain sampling: ``burn_in`` steps, then one draw every ``thinning`` steps.

    Each of the ``m`` chains contributes ``ceil(n / m)`` draws; the result is
    time-major (all chains at the first retained step, then the next) and cut
    to ``n`` rows.
    """
    if m < 1 or n < 0:
        raise ValueError("need m >= 1 and n >= 0")
    per_chain = -(-n // m) if n else 0
    chains = _Chains(target, cfg, _resolve_init(target, m, cfg, init))
    for _ in range(cfg.burn_in):
        chains.advance()
    out = np.empty((per_chain, m, target.dim))
    for i in range(per_chain):
        for _ in range(cfg.thinning):
            chains.advance()
        out[i] = chains.states
    return out.reshape(-1, target.dim)[:n]
