"""Coupling flows built from rational-quadratic splines.

A :class:`FlowModel` maps data to a standard-normal latent through a fixed
elementwise standardization followed by ``n_layers`` spline coupling layers
with alternating parity masks. The same class covers the unconditional
surrogate proposal and the conditional neural likelihood; for the latter the
context vector is appended to every conditioner input.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from math import ceil
from typing import Optional

import numpy as np

from .nn import (
    AdamState,
    DenseNetSpec,
    ParamVector,
    adam_step,
    backward_layers,
    forward_layers,
    init_params,
    unpack_layers,
)
from .spline import n_spline_params, rq_forward, rq_forward_with_grad, rq_inverse

logger = logging.getLogger(__name__)

FLOW_VERSION = "flow-v1"
_LOG_2PI = float(np.log(2.0 * np.pi))


class FlowTrainingError(RuntimeError):
    """Training diverged or the dataset cannot be split as requested."""


@dataclass(frozen=True)
class FitConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 50
    val_fraction: float = 0.1
    patience_epochs: int = 20
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience_epochs < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")


def coupling_masks(dim: int, n_layers: int) -> tuple[np.ndarray, ...]:
    """Boolean "transformed" masks; even coordinates first, then odd, alternating."""
    if dim == 1:
        return tuple(np.ones(1, dtype=bool) for _ in range(n_layers))
    idx = np.arange(dim)
    return tuple(idx % 2 == (layer % 2) for layer in range(n_layers))


@dataclass(frozen=True)
class FlowModel:
    dim: int
    context_dim: int
    n_layers: int
    n_bins: int
    tail_bound: float
    hidden_dims: tuple[int, ...]
    activation: str
    params: ParamVector
    shift: np.ndarray
    scale: np.ndarray
    context_shift: np.ndarray
    context_scale: np.ndarray
    history: tuple = field(default=(), compare=False)

    @property
    def masks(self) -> tuple[np.ndarray, ...]:
        return coupling_masks(self.dim, self.n_layers)

    def conditioner(self, layer: int) -> DenseNetSpec:
        mask = self.masks[layer]
        n_in = int((~mask).sum()) + self.context_dim
        return DenseNetSpec(
            input_dim=max(n_in, 1),
            hidden_dims=self.hidden_dims,
            output_dim=int(mask.sum()) * n_spline_params(self.n_bins),
            activation=self.activation,
            residual=True,
        )

    def with_params(self, params: ParamVector) -> "FlowModel":
        return replace(self, params=params)

    def header(self) -> dict:
        return {
            "dim": self.dim,
            "context_dim": self.context_dim,
            "bins": self.n_bins,
            "blocks": self.n_layers,
            "tail_bound": self.tail_bound,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "masks": [m.astype(int).tolist() for m in self.masks],
            "shift": [float(v) for v in self.shift],
            "scale": [float(v) for v in self.scale],
            "context_shift": [float(v) for v in self.context_shift],
            "context_scale": [float(v) for v in self.context_scale],
        }


def make_flow(
    dim: int,
    context_dim: int = 0,
    *,
    n_layers: int = 3,
    n_bins: int = 16,
    hidden_dims=(50, 50, 50),
    tail_bound: float = 3.0,
    activation: str = "relu",
    seed: int = 0,
    data: Optional[np.ndarray] = None,
    context: Optional[np.ndarray] = None,
) -> FlowModel:
    """Freshly initialized flow whose transform is exactly the identity.

    When ``data``/``context`` are given their per-coordinate mean and standard
    deviation set the fixed standardization applied before the coupling layers.
    """
    if dim < 1 or context_dim < 0:
        raise ValueError("dim must be >= 1 and context_dim >= 0")
    shift, scale = _standardizer(data, dim)
    cshift, cscale = _standardizer(context, context_dim)
    rng = np.random.default_rng(seed)
    proto = FlowModel(
        dim, context_dim, n_layers, n_bins, float(tail_bound), tuple(hidden_dims), activation,
        ParamVector(np.zeros(0), ()), shift, scale, cshift, cscale,
    )
    parts = [
        (f"l{i}", init_params(proto.conditioner(i), rng, zero_last=True)) for i in range(n_layers)
    ]
    return proto.with_params(ParamVector.concat(parts))


def _standardizer(arr, dim):
    if arr is None or dim == 0:
        return np.zeros(dim), np.ones(dim)
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, dim)
    sd = arr.std(axis=0)
    return arr.mean(axis=0), np.where(sd > 1e-12, sd, 1.0)


# ---------------------------------------------------------------- passes

def _layer_views(model: FlowModel, values: np.ndarray):
    out, pos = [], 0
    for i in range(model.n_layers):
        spec = model.conditioner(i)
        out.append((spec, unpack_layers(spec, values, pos)))
        pos += spec.n_params
    return out


def _cond_input(model: FlowModel, h: np.ndarray, mask: np.ndarray, ctx: Optional[np.ndarray]) -> np.ndarray:
    parts = [h[:, ~mask]]
    if ctx is not None:
        parts.append(ctx)
    inp = np.concatenate(parts, axis=1)
    if inp.shape[1] == 0:
        inp = np.ones((h.shape[0], 1))
    return inp


def _prepare(model: FlowModel, x, context):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise ValueError(f"flow expects points of dim {model.dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("flow input contains non-finite values")
    ctx = None
    if model.context_dim:
        if context is None:
            raise ValueError("conditional flow needs a context")
        ctx = np.atleast_2d(np.asarray(context, dtype=np.float64))
        if ctx.shape[1] != model.context_dim:
            raise ValueError(f"flow expects context of dim {model.context_dim}, got {ctx.shape[1]}")
        if ctx.shape[0] == 1 and x.shape[0] > 1:
            ctx = np.broadcast_to(ctx, (x.shape[0], model.context_dim))
        elif ctx.shape[0] != x.shape[0]:
            raise ValueError("context rows must match points or be a single row")
        ctx = (ctx - model.context_shift) / model.context_scale
    return x, ctx, single


def _to_latent(model: FlowModel, x: np.ndarray, ctx, keep: bool = False):
    h = (x - model.shift) / model.scale
    logdet = np.full(x.shape[0], -np.sum(np.log(model.scale)))
    caches = []
    for mask, (spec, layers) in zip(model.masks, _layer_views(model, model.params.values)):
        inp = _cond_input(model, h, mask, ctx)
        out, net_cache = forward_layers(spec, layers, inp)
        raw = out.reshape(h.shape[0], int(mask.sum()), -1)
        h = h.copy()
        if keep:
            y, ld, spline_bw = rq_forward_with_grad(h[:, mask], raw, model.tail_bound)
            caches.append((mask, spec, layers, net_cache, spline_bw, inp.shape[1]))
        else:
            y, ld = rq_forward(h[:, mask], raw, model.tail_bound)
        h[:, mask] = y
        logdet = logdet + ld.sum(axis=1)
    return h, logdet, caches


def flow_log_prob(model: FlowModel, point, context=None) -> np.ndarray:
    """log q(point | context) for one point or a batch of points."""
    x, ctx, single = _prepare(model, point, context)
    z, logdet, _ = _to_latent(model, x, ctx)
    lp = -0.5 * np.sum(z * z, axis=1) - 0.5 * model.dim * _LOG_2PI + logdet
    return lp[0] if single else lp


def flow_log_prob_batched(model: FlowModel, points, context=None, chunk: int = 4096) -> np.ndarray:
    points = np.atleast_2d(points)
    out = np.empty(points.shape[0])
    ctx = None if context is None else np.atleast_2d(context)
    for a in range(0, points.shape[0], chunk):
        c = ctx if ctx is None or ctx.shape[0] == 1 else ctx[a:a + chunk]
        out[a:a + chunk] = flow_log_prob(model, points[a:a + chunk], c)
    return out


def _from_latent(model: FlowModel, z: np.ndarray, ctx):
    h = z.copy()
    logdet = np.zeros(z.shape[0])
    views = _layer_views(model, model.params.values)
    for mask, (spec, layers) in reversed(list(zip(model.masks, views))):
        inp = _cond_input(model, h, mask, ctx)
        out, _ = forward_layers(spec, layers, inp)
        raw = out.reshape(h.shape[0], int(mask.sum()), -1)
        x, ld = rq_inverse(h[:, mask], raw, model.tail_bound)
        h[:, mask] = x
        logdet = logdet + ld.sum(axis=1)
    return h * model.scale + model.shift, logdet + np.sum(np.log(model.scale))


def flow_sample(model: FlowModel, n: int, context=None, rng: Optional[np.random.Generator] = None):
    """``n`` i.i.d. draws and their log-densities via the feed-forward inverse pass."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = rng if rng is not None else np.random.default_rng()
    z = rng.standard_normal((n, model.dim))
    if n == 0:
        return z, np.zeros(0)
    ctx = None
    if model.context_dim:
        if context is None:
            raise ValueError("conditional flow needs a context")
        ctx = np.atleast_2d(np.asarray(context, dtype=np.float64))
        ctx = np.broadcast_to(ctx, (n, model.context_dim)) if ctx.shape[0] == 1 else ctx
        ctx = (ctx - model.context_shift) / model.context_scale
    base = -0.5 * np.sum(z * z, axis=1) - 0.5 * model.dim * _LOG_2PI
    x, logdet = _from_latent(model, z, ctx)
    return x, base - logdet


# --------------------------------------------------------------- training

def nll_and_grad(model: FlowModel, x: np.ndarray, context=None):
    """Mean negative log-likelihood over a batch and its gradient w.r.t. all params."""
    x, ctx, _ = _prepare(model, x, context)
    n = x.shape[0]
    z, logdet, caches = _to_latent(model, x, ctx, keep=True)
    lp = -0.5 * np.sum(z * z, axis=1) - 0.5 * model.dim * _LOG_2PI + logdet
    loss = -float(lp.mean())

    g_h = z / n
    g_ld = np.full(n, -1.0 / n)
    grads = []
    for mask, spec, layers, net_cache, spline_bw, n_in in reversed(caches):
        g_ym = g_h[:, mask]
        g_xm, g_raw = spline_bw(g_ym, np.broadcast_to(g_ld[:, None], g_ym.shape))
        g_params, g_inp = backward_layers(spec, layers, net_cache, g_raw.reshape(n, -1))
        grads.append(g_params)
        g_h = g_h.copy()
        g_h[:, mask] = g_xm
        n_id = int((~mask).sum())
        if n_id:
            g_h[:, ~mask] += g_inp[:, :n_id]
    grads.reverse()
    return loss, np.concatenate(grads)


def _mean_nll(model: FlowModel, x, ctx, chunk: int = 4096) -> float:
    return -float(np.mean(flow_log_prob_batched(model, x, ctx, chunk)))


def fit_flow(
    model: FlowModel,
    data: np.ndarray,
    contexts: Optional[np.ndarray] = None,
    cfg: FitConfig = FitConfig(),
    *,
    val_size: Optional[int] = None,
) -> FlowModel:
    """Maximum-likelihood training with Adam and early stopping on a held-out split.

    Returns the parameters from the best validation epoch; the per-epoch
    ``(train_loss, val_loss)`` pairs are stored in ``history``.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < 10:
        raise FlowTrainingError(f"need at least 10 training points, got {n}")
    if not np.all(np.isfinite(data)):
        raise FlowTrainingError("training data contains non-finite values")
    if contexts is not None:
        contexts = np.asarray(contexts, dtype=np.float64)
        if contexts.shape[0] != n:
            raise FlowTrainingError("contexts must have one row per data point")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = val_size if val_size is not None else int(ceil(cfg.val_fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size < 2:
        raise FlowTrainingError("training split too small")
    x_val = data[val_idx]
    c_val = None if contexts is None else contexts[val_idx]

    state = AdamState.zeros(model.params.size, lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.params
    best_params, best_val = params, _mean_nll(model, x_val, c_val)
    history = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        perm = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for a in range(0, perm.size, cfg.batch_size):
            b = perm[a:a + cfg.batch_size]
            cur = model.with_params(params)
            loss, grad = nll_and_grad(cur, data[b], None if contexts is None else contexts[b])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise FlowTrainingError(
                    f"loss diverged at epoch {epoch} (batch loss {loss!r}); "
                    "try a lower learning rate or a wider tail bound"
                )
            state, params = adam_step(state, params, grad)
            total += loss * b.size
        val = _mean_nll(model.with_params(params), x_val, c_val)
        history.append((total / perm.size, val))
        if not np.isfinite(val):
            raise FlowTrainingError(f"validation loss non-finite at epoch {epoch}")
        if val < best_val:
            best_val, best_params, stale = val, params, 0
        else:
            stale += 1
            if stale >= cfg.patience_epochs:
                break
    logger.debug("fit_flow: %d epochs, best val %.4f", len(history), best_val)
    return replace(model, params=best_params, history=tuple(history))


# ------------------------------------------------------------ persistence

def flow_to_dict(model: FlowModel, **extra) -> dict:
    doc = {"version": FLOW_VERSION, "header": model.header(), "params": model.params.to_dict()}
    doc.update(extra)
    return doc


def flow_from_dict(doc: dict) -> FlowModel:
    version = doc.get("version")
    if version != FLOW_VERSION:
        raise ValueError(f"expected checkpoint version {FLOW_VERSION!r}, got {version!r}")
    h = doc["header"]
    model = FlowModel(
        dim=int(h["dim"]),
        context_dim=int(h["context_dim"]),
        n_layers=int(h["blocks"]),
        n_bins=int(h["bins"]),
        tail_bound=float(h["tail_bound"]),
        hidden_dims=tuple(h["hidden_dims"]),
        activation=h["activation"],
        params=ParamVector.from_dict(doc["params"]),
        shift=np.array(h["shift"], dtype=np.float64),
        scale=np.array(h["scale"], dtype=np.float64),
        context_shift=np.array(h["context_shift"], dtype=np.float64),
        context_scale=np.array(h["context_scale"], dtype=np.float64),
    )
    masks = [np.array(m, dtype=bool) for m in h["masks"]]
    if any(not np.array_equal(a, b) for a, b in zip(masks, model.masks)):
        raise ValueError("checkpoint masks do not match the coupling layout")
    expected = sum(model.conditioner(i).n_params for i in range(model.n_layers))
    if model.params.size != expected:
        raise ValueError(f"checkpoint has {model.params.size} params, layout needs {expected}")
    return model


def save_flow(model: FlowModel, path, **extra) -> None:
    with open(path, "w") as fh:
        json.dump(flow_to_dict(model, **extra), fh)


def load_flow(path) -> FlowModel:
    with open(path) as fh:
        return flow_from_dict(json.load(fh))
