"""Benchmark simulators with priors, ground-truth modes and observations.

Every simulator works on batches: ``simulate(sim, theta[n, d], rng) -> x[n, m]``.
The Gaussian-likelihood ones (Shubert and the SLCP family) also expose a
closed-form ``log_likelihood`` so the exact unnormalised posterior is available.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from . import accel

SHUBERT_XO = -186.7309
SHUBERT_NOISE_VAR = 49.0
SLCP16_TRUTH = (1.5, -2.0, -1.0, -0.9, 0.6)
SLCP256_TRUTH = (1.5, 2.0, 1.3, 1.2, 1.8, 2.5, 1.6, 1.1)
SLCP_JITTER = 1e-6
MG1_TRUTH = (1.0, 4.0, 0.2)
MG1_JOBS = 50
CLV_MODES = (
    (1.52, 0.0, 0.44, 1.36, 2.33, 0.0, 1.21, 0.51),
    (0.0, 1.52, 1.36, 0.44, 1.21, 0.51, 2.33, 0.0),
)


class SimulatorError(ValueError):
    pass


@dataclass(frozen=True)
class Simulator:
    name: str
    lo: np.ndarray
    hi: np.ndarray
    dim_x: int
    modes: np.ndarray  # (K, d) ground-truth inputs
    simulate_fn: Callable = field(repr=False)
    log_lik_fn: Callable | None = field(default=None, repr=False)
    x_o: np.ndarray | None = None
    coverage: str = "radius"  # "orthant" or "radius"
    options: dict = field(default_factory=dict)

    @property
    def dim_theta(self) -> int:
        return self.lo.size

    @property
    def tractable(self) -> bool:
        return self.log_lik_fn is not None

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    @property
    def radius(self) -> float:
        return 0.05 * float(np.linalg.norm(self.hi - self.lo))

    def log_prior(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        inside = np.all((theta >= self.lo) & (theta <= self.hi), axis=1)
        return np.where(inside, -np.sum(np.log(self.hi - self.lo)), -np.inf)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random((n, self.dim_theta)) * (self.hi - self.lo)

    def with_observation(self, x_o) -> "Simulator":
        x_o = np.asarray(x_o, dtype=np.float64).reshape(-1)
        if x_o.size != self.dim_x:
            raise SimulatorError(f"observation has {x_o.size} entries, expected {self.dim_x}")
        return replace(self, x_o=x_o)


def _check_box(sim: Simulator, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    theta = theta.reshape(1, -1) if theta.ndim == 1 else theta
    if theta.shape[1] != sim.dim_theta:
        raise SimulatorError(f"{sim.name}: expected theta of dim {sim.dim_theta}, got {theta.shape[1]}")
    if not np.all(np.isfinite(theta)):
        raise SimulatorError(f"{sim.name}: non-finite theta")
    if np.any(theta < sim.lo) or np.any(theta > sim.hi):
        raise SimulatorError(f"{sim.name}: theta outside the prior box")
    return theta


def simulate(sim: Simulator, theta, rng: np.random.Generator) -> np.ndarray:
    """Run the simulator on a batch of inputs (a single vector is promoted)."""
    theta = _check_box(sim, theta)
    return sim.simulate_fn(theta, rng)


def exact_log_likelihood(sim: Simulator, theta, x=None) -> np.ndarray:
    if not sim.tractable:
        raise SimulatorError(f"{sim.name} has no closed-form likelihood")
    x = sim.x_o if x is None else np.asarray(x, dtype=np.float64)
    if x is None:
        raise SimulatorError(f"{sim.name} has no observation attached")
    return sim.log_lik_fn(np.atleast_2d(np.asarray(theta, dtype=np.float64)), x)


def exact_posterior(sim: Simulator) -> Callable[[np.ndarray], np.ndarray]:
    """``theta[n, d] -> log p(x_o | theta) + log p(theta)``, ``-inf`` outside the box."""
    if not sim.tractable:
        raise SimulatorError(f"{sim.name} is not tractable")
    if sim.x_o is None:
        raise SimulatorError(f"{sim.name} has no observation attached")

    def log_unnorm(theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        lp = sim.log_prior(theta)
        out = np.full(theta.shape[0], -np.inf)
        ok = np.isfinite(lp)
        if ok.any():
            out[ok] = sim.log_lik_fn(theta[ok], sim.x_o) + lp[ok]
        return out

    return log_unnorm


def make_observation(sim: Simulator, theta_star=None, seed: int = 0) -> np.ndarray:
    """Pilot run at ``theta_star`` (first ground-truth mode by default)."""
    if sim.name == "shubert":
        return np.full(2, SHUBERT_XO)
    theta_star = sim.modes[0] if theta_star is None else np.asarray(theta_star, dtype=np.float64)
    return simulate(sim, theta_star, np.random.default_rng(seed))[0]


# ------------------------------------------------------------------ Shubert


def shubert_inner(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    j = np.arange(1, 6)
    return np.sum(j * np.cos(np.multiply.outer(t, j + 1) + j), axis=-1)


def shubert_mean(theta) -> np.ndarray:
    theta = np.atleast_2d(theta)
    return shubert_inner(theta[:, 0]) * shubert_inner(theta[:, 1])


def _shubert_sim(theta, rng, noise=True):
    m = shubert_mean(theta)
    x = np.stack([m, m], axis=1)
    if noise:
        x = x + np.sqrt(SHUBERT_NOISE_VAR) * rng.standard_normal(x.shape)
    return x


def _shubert_loglik(theta, x):
    m = shubert_mean(theta)
    r2 = (x[0] - m) ** 2 + (x[1] - m) ** 2
    return -0.5 * r2 / SHUBERT_NOISE_VAR - np.log(2 * np.pi * SHUBERT_NOISE_VAR)


def shubert_simulate(theta, rng: np.random.Generator, noise: bool = True) -> np.ndarray:
    """``noise=False`` returns the mean ``(m, m)``."""
    sim = get_simulator("shubert")
    return _shubert_sim(_check_box(sim, theta), rng, noise)


@lru_cache(maxsize=1)
def shubert_modes(lo: float = -10.0, hi: float = 10.0) -> np.ndarray:
    """The 18 global minimisers of the 2-D Shubert function on the box.

    The function is a product ``g(a) g(b)``; its minimum pairs a global
    maximiser of ``g`` with a global minimiser, in either order.
    """
    grid = np.linspace(lo, hi, 200001)
    vals = shubert_inner(grid)
    step = grid[1] - grid[0]

    def extrema(sign):
        s = sign * vals
        idx = np.nonzero((s[1:-1] <= s[:-2]) & (s[1:-1] <= s[2:]))[0] + 1
        pts = []
        for i in idx:
            res = minimize_scalar(
                lambda t: sign * float(shubert_inner(t)),
                bounds=(grid[i] - step, grid[i] + step),
                method="bounded",
                options={"xatol": 1e-12},
            )
            pts.append((res.x, res.fun))
        best = min(v for _, v in pts)
        return np.array(sorted(p for p, v in pts if v <= best + 1e-8))

    arg_max = extrema(-1.0)
    arg_min = extrema(1.0)
    modes = [(a, b) for a in arg_max for b in arg_min] + [(b, a) for a in arg_max for b in arg_min]
    return np.array(sorted(modes))


# ------------------------------------------------------------------ SLCP


def slcp16_params(theta):
    theta = np.atleast_2d(theta)
    mean = theta[:, :2] ** 2
    s1 = theta[:, 2] ** 2
    s2 = theta[:, 3] ** 2
    rho = np.tanh(theta[:, 4])
    cov = np.empty((theta.shape[0], 2, 2))
    cov[:, 0, 0] = s1**2 + SLCP_JITTER
    cov[:, 1, 1] = s2**2 + SLCP_JITTER
    cov[:, 0, 1] = cov[:, 1, 0] = rho * s1 * s2
    return mean, cov


def _slcp16_sim(theta, rng):
    mean, cov = slcp16_params(theta)
    chol = np.linalg.cholesky(cov)
    z = rng.standard_normal((theta.shape[0], 25, 2))
    x = mean[:, None, :] + np.einsum("nij,nkj->nki", chol, z)
    return x.reshape(theta.shape[0], 50)


def _slcp16_loglik(theta, x):
    mean, cov = slcp16_params(theta)
    pts = x.reshape(25, 2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    inv00 = cov[:, 1, 1] / det
    inv11 = cov[:, 0, 0] / det
    inv01 = -cov[:, 0, 1] / det
    d0 = pts[None, :, 0] - mean[:, 0:1]
    d1 = pts[None, :, 1] - mean[:, 1:2]
    quad = inv00[:, None] * d0**2 + 2 * inv01[:, None] * d0 * d1 + inv11[:, None] * d1**2
    return -0.5 * quad.sum(axis=1) - 25 * (np.log(2 * np.pi) + 0.5 * np.log(det))


def _slcp_d_sim(theta, rng, n_draws=5):
    mean = theta**2
    z = rng.standard_normal((theta.shape[0], n_draws, theta.shape[1]))
    return (mean[:, None, :] + z).reshape(theta.shape[0], -1)


def _slcp_d_loglik(theta, x, n_draws=5):
    d = theta.shape[1]
    pts = x.reshape(n_draws, d)
    diff = pts[None, :, :] - (theta**2)[:, None, :]
    return -0.5 * np.sum(diff**2, axis=(1, 2)) - 0.5 * n_draws * d * np.log(2 * np.pi)


def sign_flips(point, axes) -> np.ndarray:
    """All sign patterns of ``point`` over the given coordinate indices."""
    point = np.asarray(point, dtype=np.float64)
    out = []
    for signs in itertools.product((1.0, -1.0), repeat=len(axes)):
        p = point.copy()
        p[list(axes)] *= signs
        out.append(p)
    return np.array(out)


def slcp16_simulate(theta, rng):
    return simulate(get_simulator("slcp16", observe=False), theta, rng)


def slcp_modes_simulate(d: int, theta, rng):
    return simulate(get_simulator("slcp-d", d=d, observe=False), theta, rng)


def slcp_posterior_sampler(sim: Simulator, grid_size: int = 20001):
    """Exact i.i.d. sampler for the ``slcp-d`` posterior.

    The likelihood ``N(x_j; theta^2, I)`` factorises over coordinates, so each
    coordinate is drawn by inverse-CDF on a fine grid of its 1-D conditional.
    """
    if not sim.name.startswith("slcp-") or sim.x_o is None:
        raise SimulatorError("exact sampling is available for observed slcp-d simulators only")
    d = sim.dim_theta
    xbar = sim.x_o.reshape(-1, d).mean(axis=0)
    n_draws = sim.x_o.size // d
    grid = np.linspace(sim.lo[0], sim.hi[0], grid_size)
    cdfs = []
    for k in range(d):
        logp = -0.5 * n_draws * (grid**2 - xbar[k]) ** 2
        p = np.exp(logp - logp.max())
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(grid))])
        cdfs.append(cdf / cdf[-1])

    def draw(n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((n, d))
        return np.stack([np.interp(u[:, k], cdfs[k], grid) for k in range(d)], axis=1)

    return draw


# ------------------------------------------------------------------ M/G/1


def _mg1_numpy(theta, u_service, e_arrival):
    service = theta[:, :1] + theta[:, 1:2] * u_service
    arrivals = np.cumsum(e_arrival / theta[:, 2:3], axis=1)
    n, jobs = u_service.shape
    out = np.empty((n, jobs))
    dep = np.zeros(n)
    for i in range(jobs):
        inc = service[:, i] + np.maximum(0.0, arrivals[:, i] - dep)
        dep = dep + inc
        out[:, i] = inc
    return out


def mg1_inter_departures(theta, u_service, e_arrival) -> np.ndarray:
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if accel.use_numba():
        from . import _nb

        return _nb.mg1_inter_departures(theta, np.ascontiguousarray(u_service), np.ascontiguousarray(e_arrival))
    return _mg1_numpy(theta, u_service, e_arrival)


def _mg1_sim(theta, rng):
    if np.any(theta[:, 2] <= 0):
        raise SimulatorError("mg1: arrival rate theta_3 must be positive")
    n = theta.shape[0]
    u = rng.random((n, MG1_JOBS))
    e = rng.standard_exponential((n, MG1_JOBS))
    inter = mg1_inter_departures(theta, u, e)
    return np.percentile(inter, np.linspace(0, 100, 5), axis=1).T


def mg1_simulate(theta, rng):
    return simulate(get_simulator("mg1", observe=False), theta, rng)


# ------------------------------------------------------------------ CLV


def clv_alpha(theta) -> np.ndarray:
    theta = np.atleast_2d(theta)
    n = theta.shape[0]
    a = np.zeros((n, 4, 4))
    a[:, 0, 0] = a[:, 1, 1] = a[:, 2, 2] = a[:, 3, 3] = 1.0
    a[:, 0, 1] = 1.09
    a[:, 0, 2], a[:, 0, 3] = theta[:, 0], theta[:, 1]
    a[:, 1, 2], a[:, 1, 3] = theta[:, 2], theta[:, 3]
    a[:, 2, 0], a[:, 2, 1] = theta[:, 4], theta[:, 5]
    a[:, 3, 0], a[:, 3, 1] = theta[:, 6], theta[:, 7]
    a[:, 2, 3] = a[:, 3, 2] = 0.35
    return a


def _clv_numpy(x0, r, alphas, dt, n_steps, blowup):
    n = alphas.shape[0]
    x = np.broadcast_to(x0, (n, x0.size)).copy()
    traj = np.empty((n, n_steps, x0.size))
    alive = np.ones(n, dtype=bool)

    def rhs(v):
        return r * v * (1.0 - np.einsum("nij,nj->ni", alphas, v))

    for step in range(n_steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = np.maximum(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
        with np.errstate(invalid="ignore"):
            alive &= np.all(np.abs(x) <= blowup, axis=1)
        x[~alive] = np.nan
        traj[:, step] = x
    return traj


def clv_trajectory(alphas, r, x0, dt: float, n_steps: int, blowup: float = 1e6) -> np.ndarray:
    """RK4 trajectories ``(n, n_steps, species)``; rows that blow up are NaN from then on."""
    alphas = np.asarray(alphas, dtype=np.float64)
    alphas = np.ascontiguousarray(alphas[None] if alphas.ndim == 2 else alphas)
    r = np.ascontiguousarray(r, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if accel.use_numba():
        from . import _nb

        return _nb.clv_rk4(x0, r, alphas, float(dt), int(n_steps), float(blowup))
    return _clv_numpy(x0, r, alphas, float(dt), int(n_steps), float(blowup))


def _clv_sim(theta, rng, *, r, x0, dt, n_steps):
    traj = clv_trajectory(clv_alpha(theta), r, x0, dt, n_steps)
    total = traj.sum(axis=2)
    if np.isnan(total).any():
        bad = theta[np.isnan(total).any(axis=1)][0]
        raise SimulatorError(f"clv: integration blew up (|x| > 1e6) at theta={bad.tolist()}")
    return np.percentile(total, np.linspace(0, 100, 10), axis=1).T


def clv_simulate(theta, rng, **options):
    return simulate(get_simulator("clv", observe=False, **options), theta, rng)


# ------------------------------------------------------------------ registry

CLV_DEFAULTS = {"r": (1.0, 0.72, 1.53, 1.53), "x0": 0.3, "dt": 0.1, "n_steps": 1000, "prior_hi": 3.0}


def _build(name: str, d: int | None, options: dict) -> Simulator:
    if name == "shubert":
        return Simulator(
            "shubert", np.full(2, -10.0), np.full(2, 10.0), 2, shubert_modes(),
            _shubert_sim, _shubert_loglik, coverage="radius",
        )
    if name == "slcp16":
        modes = sign_flips(SLCP16_TRUTH, range(4))
        return Simulator(
            "slcp16", np.full(5, -3.0), np.full(5, 3.0), 50, modes, _slcp16_sim, _slcp16_loglik,
            coverage="orthant",
        )
    if name in ("slcp256", "slcp-d"):
        if name == "slcp256":
            d = 8
        if d is None or d < 1:
            raise SimulatorError("slcp-d needs a dimension d >= 1")
        truth = np.array(SLCP256_TRUTH) if d == 8 else np.asarray(options.get("truth", np.linspace(1.1, 2.5, d)))
        if truth.size != d:
            raise SimulatorError("slcp-d truth length must equal d")
        return Simulator(
            f"slcp-{d}", np.full(d, -3.0), np.full(d, 3.0), 5 * d, sign_flips(truth, range(d)),
            _slcp_d_sim, _slcp_d_loglik, coverage="orthant", options={"d": d},
        )
    if name == "mg1":
        return Simulator(
            "mg1", np.zeros(3), np.array([10.0, 10.0, 1.0 / 3.0]), 5, np.array([MG1_TRUTH]), _mg1_sim,
            coverage="radius",
        )
    if name == "clv":
        opts = {**CLV_DEFAULTS, **options}
        unknown = set(opts) - set(CLV_DEFAULTS)
        if unknown:
            raise SimulatorError(f"unknown clv options: {sorted(unknown)}")
        r = np.asarray(opts["r"], dtype=np.float64)
        x0 = np.broadcast_to(np.asarray(opts["x0"], dtype=np.float64), (4,)).copy()

        def sim_fn(theta, rng):
            return _clv_sim(theta, rng, r=r, x0=x0, dt=float(opts["dt"]), n_steps=int(opts["n_steps"]))

        return Simulator(
            "clv", np.zeros(8), np.full(8, float(opts["prior_hi"])), 10, np.array(CLV_MODES), sim_fn,
            coverage="radius", options=opts,
        )
    raise SimulatorError(f"unknown simulator {name!r}; choose from {sorted(SIMULATOR_NAMES)}")


SIMULATOR_NAMES = ("shubert", "slcp16", "slcp256", "slcp-d", "mg1", "clv")


def get_simulator(name: str, *, d: int | None = None, obs_seed: int = 0, observe: bool = True, **options) -> Simulator:
    """Look up a simulator by name and attach its observation (pilot run at the first mode)."""
    sim = _build(name, d, options)
    if observe:
        sim = sim.with_observation(make_observation(sim, seed=obs_seed))
    return sim


# ------------------------------------------------------------------ batch I/O


def batch_to_csv(path, theta, x, header_comment: str = "") -> None:
    from .io import write_csv

    theta = np.atleast_2d(theta)
    x = np.atleast_2d(x)
    cols = [f"theta{i}" for i in range(theta.shape[1])] + [f"x{i}" for i in range(x.shape[1])]
    write_csv(path, cols, np.hstack([theta, x]), comment=header_comment)


def batch_from_csv(path, dim_theta: int):
    from .io import read_csv

    _, data = read_csv(path)
    return data[:, :dim_theta], data[:, dim_theta:]
