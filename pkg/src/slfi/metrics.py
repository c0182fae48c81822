"""Sample-quality diagnostics.

Mode coverage (Missed Mode, Sample Imbalance), the determinant-ratio ESS,
unbiased Gaussian-kernel MMD, a small full-covariance GMM for the inception
score, and the sampling/estimation/ISP error table.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import accel


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- modes


@dataclass(frozen=True)
class ModeSet:
    modes: np.ndarray
    rule: str = "orthant"  # or "radius"
    radius: float | None = None

    def __post_init__(self):
        modes = np.atleast_2d(np.asarray(self.modes, dtype=np.float64))
        object.__setattr__(self, "modes", modes)
        if modes.shape[0] < 1:
            raise MetricError("need at least one mode")
        if self.rule == "orthant":
            signs = {tuple(np.sign(m)) for m in modes}
            if len(signs) != modes.shape[0] or np.any(modes == 0):
                raise MetricError("orthant rule needs modes in distinct orthants with no zero coordinate")
        elif self.rule == "radius":
            if self.radius is None or self.radius <= 0:
                raise MetricError("radius rule needs a positive radius")
        else:
            raise MetricError(f"unknown coverage rule {self.rule!r}")

    @property
    def k(self) -> int:
        return self.modes.shape[0]

    @classmethod
    def for_simulator(cls, sim) -> "ModeSet":
        if sim.coverage == "orthant":
            return cls(sim.modes, "orthant")
        return cls(sim.modes, "radius", sim.radius)


def assign_modes(samples, modes: ModeSet) -> np.ndarray:
    """Index of the mode each sample falls to, or -1 when it covers none."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, modes.modes.shape[1])
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if modes.rule == "orthant":
        # encode sign patterns as integers (bit set = positive)
        weights = 1 << np.arange(modes.modes.shape[1], dtype=np.int64)
        mode_code = (modes.modes > 0).astype(np.int64) @ weights
        lookup = {int(c): i for i, c in enumerate(mode_code)}
        code = (x > 0).astype(np.int64) @ weights
        out = np.array([lookup.get(int(c), -1) for c in code], dtype=np.int64)
        out[np.any(x == 0, axis=1)] = -1
        return out
    d2 = ((x[:, None, :] - modes.modes[None, :, :]) ** 2).sum(axis=2)
    near = np.argmin(d2, axis=1)
    ok = d2[np.arange(x.shape[0]), near] <= modes.radius**2
    return np.where(ok, near, -1)


def covered_modes(samples, modes: ModeSet) -> np.ndarray:
    hit = assign_modes(samples, modes)
    return np.unique(hit[hit >= 0])


def missed_mode(samples, modes: ModeSet) -> int:
    return modes.k - covered_modes(samples, modes).size


def sample_imbalance(samples, modes: ModeSet) -> float:
    """Unhalved total variation ``sum |v - u|`` between mode frequencies and uniform."""
    hit = assign_modes(samples, modes)
    if hit.size == 0:
        return math.nan
    v = np.bincount(hit[hit >= 0], minlength=modes.k) / hit.size
    return float(np.abs(v - 1.0 / modes.k).sum())


def effective_sample_size(samples, reference_cov, *, root: bool = False) -> float:
    """``N det(Lambda) / det(Sigma)``, or ``N (det ratio)^(1/d)`` when ``root``."""
    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n <= d:
        raise MetricError(f"need more samples ({n}) than dimensions ({d})")
    sigma = np.atleast_2d(np.asarray(reference_cov, dtype=np.float64))
    s_sign, s_logdet = np.linalg.slogdet(sigma)
    if s_sign <= 0:
        raise MetricError("reference covariance is singular")
    sign, logdet = np.linalg.slogdet(np.atleast_2d(np.cov(x, rowvar=False)))
    if sign <= 0 or not np.isfinite(logdet):
        warnings.warn("sample covariance is singular; ESS reported as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    log_ratio = logdet - s_logdet
    return float(n * math.exp(log_ratio / d if root else log_ratio))


# ---------------------------------------------------------------- MMD


def _kernel_sum_numpy(a, b, inv_two_s2, skip_diag):
    total_rows = np.empty(a.shape[0])
    bb = np.einsum("ij,ij->i", b, b)
    step = max(1, 2_000_000 // max(b.shape[0], 1))
    for s in range(0, a.shape[0], step):
        blk = a[s : s + step]
        d2 = np.einsum("ij,ij->i", blk, blk)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-d2 * inv_two_s2)
        if skip_diag:
            idx = np.arange(blk.shape[0])
            k[idx, s + idx] = 0.0
        total_rows[s : s + step] = k.sum(axis=1)
    return total_rows


def kernel_sum(a, b, sigma: float, skip_diag: bool = False) -> float:
    """``sum_{i,j} exp(-|a_i - b_j|^2 / (2 sigma^2))``, diagonal dropped when ``skip_diag``.

    Rows are summed independently and then reduced in fixed order, so the
    result does not depend on the thread count.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    if accel.use_numba():
        from . import _nb

        rows = _nb.gauss_kernel_row_sums(a, b, inv, bool(skip_diag))
    else:
        rows = _kernel_sum_numpy(a, b, inv, skip_diag)
    return float(np.sum(rows))


def median_bandwidth(x, y=None, max_points: int = 2000) -> float:
    """Median pairwise distance of the pooled set (deterministic subsample when large)."""
    pool = np.asarray(x, dtype=np.float64) if y is None else np.vstack([x, y])
    if pool.shape[0] > max_points:
        idx = np.random.default_rng(0).choice(pool.shape[0], max_points, replace=False)
        pool = pool[np.sort(idx)]
    diff = pool[:, None, :] - pool[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    med = float(np.median(dist[np.triu_indices(pool.shape[0], 1)]))
    if not med > 0:
        warnings.warn("median pairwise distance is zero; using bandwidth 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return med


def _resolve_bandwidth(bandwidth, x, y):
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise MetricError(f"unknown bandwidth rule {bandwidth!r}")
        return median_bandwidth(x, y)
    bw = float(bandwidth)
    if not bw > 0:
        raise MetricError("bandwidth must be positive")
    return bw


def self_kernel_mean(x, sigma: float) -> float:
    n = x.shape[0]
    return kernel_sum(x, x, sigma, skip_diag=True) / (n * (n - 1))


def mmd2(x, y, bandwidth="median", *, y_self: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel.

    ``y_self`` lets callers that compare many sets against one reference pass
    its precomputed within-set kernel mean.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise MetricError("mmd2 needs at least two points per set")
    if x.shape[1] != y.shape[1]:
        raise MetricError("sets differ in dimension")
    sigma = _resolve_bandwidth(bandwidth, x, y)
    kxx = self_kernel_mean(x, sigma)
    kyy = self_kernel_mean(y, sigma) if y_self is None else y_self
    kxy = kernel_sum(x, y, sigma) / (x.shape[0] * y.shape[0])
    return kxx + kyy - 2.0 * kxy


def mmd2_empirical(x, y, bandwidth="median", *, y_self: float | None = None) -> float:
    """Squared kernel distance between the empirical measures of ``x`` and ``y``.

    Keeps the diagonal (V-statistic), so a single point is allowed, the value
    is never negative and its square root obeys the triangle inequality. For
    i.i.d. draws its mean shrinks like ``1/n`` towards the population MMD, which
    is the finite-sample term the error decomposition tracks.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise MetricError("mmd2_empirical needs non-empty sets")
    if x.shape[1] != y.shape[1]:
        raise MetricError("sets differ in dimension")
    sigma = _resolve_bandwidth(bandwidth, x, y)
    kxx = kernel_sum(x, x, sigma) / x.shape[0] ** 2
    kyy = kernel_sum(y, y, sigma) / y.shape[0] ** 2 if y_self is None else y_self
    kxy = kernel_sum(x, y, sigma) / (x.shape[0] * y.shape[0])
    return max(kxx + kyy - 2.0 * kxy, 0.0)


def mmd_permutation_test(x, y, n_perm: int = 200, bandwidth="median", seed: int = 0):
    """Return ``(statistic, null 95th percentile, p-value)`` with a fixed bandwidth."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    sigma = _resolve_bandwidth(bandwidth, x, y)
    stat = mmd2(x, y, sigma)
    pool = np.vstack([x, y])
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(pool.shape[0])
        null[i] = mmd2(pool[p[: x.shape[0]]], pool[p[x.shape[0] :]], sigma)
    return stat, float(np.quantile(null, 0.95)), float((1 + np.sum(null >= stat)) / (n_perm + 1))


# ---------------------------------------------------------------- GMM


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    history: tuple = ()
    n_iter: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.size


def _floor_cov(cov, floor):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _component_logpdf(x, means, covs):
    n, d = x.shape
    out = np.empty((n, means.shape[0]))
    for c in range(means.shape[0]):
        chol = np.linalg.cholesky(covs[c])
        z = np.linalg.solve(chol, (x - means[c]).T)
        out[:, c] = -0.5 * (z * z).sum(axis=0) - np.log(np.diag(chol)).sum() - 0.5 * d * np.log(2 * np.pi)
    return out


def gmm_log_resp(gmm: GmmModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log responsibilities and log densities."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    joint = _component_logpdf(x, gmm.means, gmm.covariances) + np.log(np.maximum(gmm.weights, 1e-300))
    ll = logsumexp(joint, axis=1)
    return joint - ll[:, None], ll


def gmm_responsibilities(gmm: GmmModel, x) -> np.ndarray:
    return np.exp(gmm_log_resp(gmm, x)[0])


def kmeans_pp(x, c: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def gmm_fit(samples, c: int, seed: int = 0, *, tol: float = 1e-6, max_iter: int = 200, floor: float = 1e-6) -> GmmModel:
    """EM for a full-covariance mixture with k-means++ seeding."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    if c < 1 or n < 10 * c:
        raise MetricError(f"gmm_fit needs n >= 10*C (n={n}, C={c})")
    rng = np.random.default_rng(seed)
    means = kmeans_pp(x, c, rng)
    base_cov = _floor_cov(np.atleast_2d(np.cov(x, rowvar=False)), floor)
    labels = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(c)[labels]
    reinit = np.zeros(c, dtype=bool)
    history: list[float] = []
    weights = covs = None
    for it in range(max_iter):
        nk = resp.sum(axis=0)
        empty = nk < 1e-8
        if empty.any():
            if np.any(reinit[empty]):
                raise MetricError("GMM component collapsed twice")
            reinit |= empty
            for k in np.nonzero(empty)[0]:
                far = int(np.argmax(((x[:, None, :] - means[None]) ** 2).sum(axis=2).min(axis=1)))
                resp[far] = 0.0
                resp[far, k] = 1.0
            nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((c, d, d))
        for k in range(c):
            diff = x - means[k]
            cov = (resp[:, k, None] * diff).T @ diff / nk[k] if nk[k] > 1 else base_cov
            covs[k] = _floor_cov(cov, floor)
        model = GmmModel(weights, means, covs, 0.0)
        log_resp, ll = gmm_log_resp(model, x)
        history.append(float(ll.mean()))
        resp = np.exp(log_resp)
        if it > 0 and history[-1] - history[-2] < tol:
            break
    return GmmModel(weights, means, covs, history[-1] * n, tuple(history), len(history))


def inception_score(samples, gmm: GmmModel) -> float:
    """``exp(mean_theta KL(p(c|theta) || p(c)))`` with GMM responsibilities as ``p(c|theta)``."""
    resp = np.clip(gmm_responsibilities(gmm, samples), 1e-12, None)
    marginal = resp.mean(axis=0)
    kl = np.sum(resp * (np.log(resp) - np.log(marginal)), axis=1)
    return float(np.exp(np.mean(kl)))


# ---------------------------------------------------------------- error table


@dataclass(frozen=True)
class ErrorRow:
    m: int
    sampling: float
    sampling_se: float
    estimation: float
    estimation_se: float
    isp: float
    isp_se: float
    n_seeds: int


def _mean_se(vals):
    vals = np.asarray(vals, dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
    return float(vals.mean()), se


def error_decomposition(
    surrogate: Callable[[np.ndarray, int], np.ndarray] | None,
    teacher_draw_fn: Callable[[int, int], np.ndarray],
    reference,
    m_grid: Sequence[int],
    seeds: Sequence[int],
    bandwidth: float | None = None,
) -> list[ErrorRow]:
    """Sampling, estimation and ISP errors per teacher size.

    Each error is :func:`mmd2_empirical` between empirical measures, so the
    ``1/M`` spread of a small teacher set counts towards the sampling error.

    ``teacher_draw_fn(M, seed)`` returns the teacher set for ``M`` chains;
    ``surrogate(teacher, seed)`` fits a surrogate and returns its samples (pass
    ``None`` to skip the last two columns). One bandwidth, from the reference,
    is shared by every comparison so rows are on the same scale.
    """
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if ref.shape[0] < 20_000:
        raise MetricError("reference set needs at least 20,000 points")
    sigma = median_bandwidth(ref) if bandwidth is None else float(bandwidth)
    ref_self = kernel_sum(ref, ref, sigma) / ref.shape[0] ** 2
    rows = []
    for m in m_grid:
        samp, est, isp = [], [], []
        for seed in seeds:
            teacher = np.atleast_2d(teacher_draw_fn(int(m), int(seed)))
            samp.append(mmd2_empirical(teacher, ref, sigma, y_self=ref_self))
            if surrogate is not None:
                draws = np.atleast_2d(surrogate(teacher, int(seed)))
                isp.append(mmd2_empirical(draws, ref, sigma, y_self=ref_self))
                est.append(mmd2_empirical(draws, teacher, sigma))
        rows.append(ErrorRow(int(m), *_mean_se(samp), *_mean_se(est), *_mean_se(isp), len(seeds)))
    return rows
