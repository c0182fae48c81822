"""Inference heads and the proposal densities built from them.

SNL fits a conditional flow ``q(x | theta)`` by maximum likelihood on the
cumulative dataset. AALR fits a classifier between joint pairs and pairs whose
``x`` was shuffled within the minibatch; its logit estimates
``log p(x | theta) - log p(x)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .flows import (
    FitConfig,
    FlowModel,
    FlowTrainingError,
    fit_flow,
    flow_from_dict,
    flow_log_prob,
    flow_log_prob_batched,
    flow_sample,
    flow_to_dict,
    make_flow,
)
from .mcmc import TargetDensity
from .nn import AdamState, DenseNetSpec, ParamVector, adam_step, forward_layers, backward_layers, init_params, unpack_layers


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class JointDataset:
    """Append-only ``(theta, x, round)`` records."""

    theta: np.ndarray
    x: np.ndarray
    rounds: np.ndarray

    @classmethod
    def empty(cls, dim_theta: int, dim_x: int) -> "JointDataset":
        return cls(np.empty((0, dim_theta)), np.empty((0, dim_x)), np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.theta.shape[0]

    def append(self, theta, x, round_idx: int) -> "JointDataset":
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if theta.shape[0] != x.shape[0]:
            raise ValueError("theta and x need the same number of rows")
        if theta.shape[1] != self.theta.shape[1] or x.shape[1] != self.x.shape[1]:
            raise ValueError("dimension mismatch with existing records")
        tags = np.full(theta.shape[0], int(round_idx), dtype=np.int64)
        return JointDataset(
            np.vstack([self.theta, theta]), np.vstack([self.x, x]), np.concatenate([self.rounds, tags])
        )


# ---------------------------------------------------------------- SNL


def snl_flow(dim_x: int, dim_theta: int, data: JointDataset, *, seed: int = 0, **flow_kw) -> FlowModel:
    """Fresh conditional flow standardised on ``data``."""
    return make_flow(dim_x, dim_theta, data=data.x, context=data.theta, seed=seed, **flow_kw)


def snl_loss(model: FlowModel, data: JointDataset) -> float:
    """Mean negative conditional log-likelihood over every record."""
    return -float(np.mean(flow_log_prob_batched(model, data.x, data.theta)))


def train_snl(data: JointDataset, cfg: FitConfig = FitConfig(), init: FlowModel | None = None, **flow_kw) -> FlowModel:
    if len(data) < 20:
        raise FlowTrainingError(f"SNL needs at least 20 pairs, got {len(data)}")
    model = init if init is not None else snl_flow(data.x.shape[1], data.theta.shape[1], data, seed=cfg.seed, **flow_kw)
    return fit_flow(model, data.x, data.theta, cfg)


# ---------------------------------------------------------------- AALR


@dataclass(frozen=True)
class RatioClassifier:
    spec: DenseNetSpec
    params: ParamVector
    theta_shift: np.ndarray
    theta_scale: np.ndarray
    x_shift: np.ndarray
    x_scale: np.ndarray
    history: tuple = field(default=(), compare=False)

    @property
    def dim_theta(self) -> int:
        return self.theta_shift.size

    def _inputs(self, theta, x):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = max(theta.shape[0], x.shape[0])
        theta = np.broadcast_to(theta, (n, theta.shape[1]))
        x = np.broadcast_to(x, (n, x.shape[1]))
        return np.hstack([(theta - self.theta_shift) / self.theta_scale, (x - self.x_shift) / self.x_scale])

    def logit(self, theta, x) -> np.ndarray:
        out, _ = forward_layers(self.spec, unpack_layers(self.spec, self.params.values), self._inputs(theta, x))
        return out[:, 0]


def make_classifier(dim_theta: int, dim_x: int, data: JointDataset | None = None, *, hidden=(256, 256, 256),
                    activation: str = "selu", seed: int = 0) -> RatioClassifier:
    spec = DenseNetSpec(dim_theta + dim_x, tuple(hidden), 1, activation, residual=False)
    params = init_params(spec, np.random.default_rng(seed))

    def stats(a, d):
        if a is None or len(a) == 0:
            return np.zeros(d), np.ones(d)
        sd = a.std(axis=0)
        return a.mean(axis=0), np.where(sd > 1e-12, sd, 1.0)

    ts, tc = stats(None if data is None else data.theta, dim_theta)
    xs, xc = stats(None if data is None else data.x, dim_x)
    return RatioClassifier(spec, params, ts, tc, xs, xc)


def _bce_and_grad(clf: RatioClassifier, values, theta, x, perm):
    """Mean binary cross-entropy over joint (label 1) and shuffled (label 0) pairs."""
    n = theta.shape[0]
    inp = np.vstack([clf._inputs(theta, x), clf._inputs(theta, x[perm])])
    layers = unpack_layers(clf.spec, values)
    out, cache = forward_layers(clf.spec, layers, inp)
    logit = out[:, 0]
    label = np.concatenate([np.ones(n), np.zeros(n)])
    loss = -float(np.mean(label * log_expit(logit) + (1 - label) * log_expit(-logit)))
    g = ((expit(logit) - label) / (2 * n))[:, None]
    grads, _ = backward_layers(clf.spec, layers, cache, g, want_input=False)
    return loss, grads


def _bce(clf: RatioClassifier, theta, x, perm) -> float:
    inp = np.vstack([clf._inputs(theta, x), clf._inputs(theta, x[perm])])
    out, _ = forward_layers(clf.spec, unpack_layers(clf.spec, clf.params.values), inp)
    logit = out[:, 0]
    n = theta.shape[0]
    return -float((log_expit(logit[:n]).sum() + log_expit(-logit[n:]).sum()) / (2 * n))


def train_aalr(data: JointDataset, cfg: FitConfig = FitConfig(batch_size=256), init: RatioClassifier | None = None,
               **net_kw) -> RatioClassifier:
    if len(data) < 20:
        raise FlowTrainingError(f"AALR needs at least 20 pairs, got {len(data)}")
    clf = init if init is not None else make_classifier(data.theta.shape[1], data.x.shape[1], data, seed=cfg.seed, **net_kw)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    order = rng.permutation(n)
    n_val = min(max(int(math.ceil(cfg.val_fraction * n)), 2), n - 2)
    val_idx, train_idx = order[:n_val], order[n_val:]
    th_v, x_v = data.theta[val_idx], data.x[val_idx]
    perm_v = rng.permutation(n_val)

    state = AdamState.zeros(clf.params.size, lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = clf.params
    best, best_val = params, _bce(clf, th_v, x_v, perm_v)
    history, stale = [], 0
    for epoch in range(cfg.max_epochs):
        idx = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for a in range(0, idx.size, cfg.batch_size):
            b = idx[a:a + cfg.batch_size]
            if b.size < 2:
                continue
            loss, grad = _bce_and_grad(clf, params.values, data.theta[b], data.x[b], rng.permutation(b.size))
            if not np.isfinite(loss):
                raise FlowTrainingError(f"classifier loss diverged at epoch {epoch}")
            state, params = adam_step(state, params, grad)
            total += loss * b.size
        val = _bce(replace(clf, params=params), th_v, x_v, perm_v)
        history.append((total / idx.size, val))
        if val < best_val:
            best, best_val, stale = params, val, 0
        else:
            stale += 1
            if stale >= cfg.patience_epochs:
                break
    return replace(clf, params=best, history=tuple(history))


# ---------------------------------------------------------------- proposals

Head = Union[FlowModel, RatioClassifier]


def head_kind(head: Head) -> str:
    if isinstance(head, FlowModel):
        return "snl"
    if isinstance(head, RatioClassifier):
        return "aalr"
    raise TypeError(f"unsupported head type {type(head).__name__}")


def log_likelihood_term(head: Head, theta, x_o, chunk: int = 4096) -> np.ndarray:
    """``log q(x_o | theta)`` for SNL or the classifier logit for AALR."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    x_o = np.asarray(x_o, dtype=np.float64).reshape(1, -1)
    out = np.empty(theta.shape[0])
    for a in range(0, theta.shape[0], chunk):
        th = theta[a:a + chunk]
        if isinstance(head, FlowModel):
            out[a:a + chunk] = flow_log_prob(head, np.broadcast_to(x_o, (th.shape[0], x_o.shape[1])), th)
        else:
            out[a:a + chunk] = head.logit(th, x_o)
    return out


def proposal_density(head: Head | None, sim, x_o=None, offset: float = 0.0) -> TargetDensity:
    """Unnormalised ``log q(x_o | theta) + log p(theta)`` on the prior box (``head=None``: prior)."""
    x_o = sim.x_o if x_o is None else x_o
    log_vol = float(np.sum(np.log(sim.hi - sim.lo)))
    if head is None:
        return TargetDensity(lambda th: np.full(th.shape[0], -log_vol), sim.lo, sim.hi)
    head_kind(head)

    def log_density(theta):
        return log_likelihood_term(head, theta, x_o) - log_vol + offset

    return TargetDensity(log_density, sim.lo, sim.hi)


@dataclass(frozen=True)
class TruthScore:
    value: float  # -sum_k log p(theta_k* | x_o)
    stderr: float
    log_z: float
    approximate: bool


def log_normalizer(proposal: TargetDensity, n_mc: int, rng: np.random.Generator, surrogate: FlowModel | None = None,
                   sim=None):
    """``(log Z, standard error of log Z)`` for an unnormalised proposal on its box.

    Plain prior Monte Carlo by default; with ``surrogate`` the draws come from
    the surrogate truncated to the box (importance sampling).
    """
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    lo, hi = proposal.lo, proposal.hi
    if surrogate is None:
        theta = lo + rng.random((n_mc, lo.size)) * (hi - lo)
        logw = proposal(theta) + np.sum(np.log(hi - lo))
    else:
        draws, logq = flow_sample(surrogate, n_mc, rng=rng)
        inside = proposal.inside(draws)
        frac = inside.mean()
        if frac == 0:
            raise ValueError("surrogate has no mass inside the box")
        logw = np.full(n_mc, -np.inf)
        logw[inside] = proposal(draws[inside]) - (logq[inside] - math.log(frac))
    log_z = float(logsumexp(logw) - math.log(n_mc))
    if not np.isfinite(log_z):
        raise ValueError("normalizer estimate is not finite")
    w = np.exp(logw - log_z)
    se = float(w.std(ddof=1) / math.sqrt(n_mc))
    return log_z, se


def posterior_log_prob_at_truth(head: Head, sim, n_mc: int, rng: np.random.Generator, *, x_o=None,
                                surrogate: FlowModel | None = None) -> TruthScore:
    """``-sum_k log p_hat(theta_k* | x_o)`` using a Monte Carlo normaliser."""
    proposal = proposal_density(head, sim, x_o)
    log_z, se = log_normalizer(proposal, n_mc, rng, surrogate)
    lq = proposal(sim.modes)
    value = -float(np.sum(lq - log_z))
    return TruthScore(value, sim.n_modes * se, log_z, head_kind(head) == "aalr")


# ---------------------------------------------------------------- persistence


def head_to_dict(head: Head) -> dict:
    kind = head_kind(head)
    if kind == "snl":
        return flow_to_dict(head, head="snl")
    return {
        "head": "aalr",
        "spec": head.spec.to_dict(),
        "params": head.params.to_dict(),
        "theta_shift": head.theta_shift.tolist(),
        "theta_scale": head.theta_scale.tolist(),
        "x_shift": head.x_shift.tolist(),
        "x_scale": head.x_scale.tolist(),
    }


def head_from_dict(doc: dict) -> Head:
    kind = doc.get("head")
    if kind == "snl":
        return flow_from_dict(doc)
    if kind == "aalr":
        s = doc["spec"]
        spec = DenseNetSpec(s["input_dim"], tuple(s["hidden_dims"]), s["output_dim"], s["activation"], s["residual"])
        params = ParamVector.from_dict(doc["params"])
        if params.size != spec.n_params:
            raise ValueError("classifier parameter count does not match its spec")
        arr = lambda k: np.asarray(doc[k], dtype=np.float64)  # noqa: E731
        return RatioClassifier(spec, params, arr("theta_shift"), arr("theta_scale"), arr("x_shift"), arr("x_scale"))
    raise ValueError(f"unknown head type {kind!r}")


def save_head(head: Head, path) -> None:
    Path(path).write_text(json.dumps(head_to_dict(head)))


def load_head(path) -> Head:
    return head_from_dict(json.loads(Path(path).read_text()))
