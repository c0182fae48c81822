"""Small dense networks with hand-written reverse-mode gradients and Adam.

Only the fixed architectures needed by the spline conditioners and the ratio
classifier are supported: a plain MLP and a pre-activation residual MLP.
Weights are stored as ``(in, out)`` matrices so a batch forward pass is
``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from math import prod
from typing import Sequence

import numpy as np

NNCORE_VERSION = "nncore-v1"

_ACTIVATIONS = ("relu", "selu", "tanh")
_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step receives NaN or infinite gradients."""


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter array plus the ordered ``(name, shape)`` segments it holds."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        layout = tuple((str(n), tuple(int(s) for s in shape)) for n, shape in self.layout)
        total = sum(prod(shape) for _, shape in layout)
        if total != values.size:
            raise ValueError(f"layout describes {total} values, got {values.size}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @property
    def size(self) -> int:
        return self.values.size

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, pos = {}, 0
        for name, shape in self.layout:
            out[name] = (pos, shape)
            pos += prod(shape)
        return out

    def views(self) -> dict[str, np.ndarray]:
        """Name -> reshaped view into ``values`` (no copies)."""
        return {
            name: self.values[pos:pos + prod(shape)].reshape(shape)
            for name, (pos, shape) in self.offsets().items()
        }

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def to_dict(self) -> dict:
        return {
            "version": NNCORE_VERSION,
            "layout": [{"name": n, "shape": list(s)} for n, s in self.layout],
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamVector":
        version = doc.get("version")
        if version != NNCORE_VERSION:
            raise ValueError(f"expected parameter document {NNCORE_VERSION!r}, got {version!r}")
        layout = tuple((seg["name"], tuple(seg["shape"])) for seg in doc["layout"])
        return cls(np.array(doc["values"], dtype=np.float64), layout)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ParamVector":
        return cls.from_dict(json.loads(text))

    @staticmethod
    def concat(parts: Sequence[tuple[str, "ParamVector"]]) -> "ParamVector":
        """Join several vectors, prefixing each segment name with ``prefix.``."""
        values = np.concatenate([p.values for _, p in parts]) if parts else np.zeros(0)
        layout = tuple(
            (f"{prefix}.{name}", shape) for prefix, p in parts for name, shape in p.layout
        )
        return ParamVector(values, layout)


@dataclass(frozen=True)
class DenseNetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim, *self.hidden_dims)
        if not self.hidden_dims or min(dims) < 1:
            raise ValueError(f"all network dims must be >= 1, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.residual and len(set(self.hidden_dims)) != 1:
            raise ValueError("residual networks need equal hidden widths")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        segs = []
        for i, (a, b) in enumerate(self.layer_dims()):
            segs.append((f"W{i}", (a, b)))
            segs.append((f"b{i}", (b,)))
        return tuple(segs)

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_dims())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "residual": self.residual,
        }


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)


# ----------------------------------------------------------------- activations

def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return _SELU_SCALE * np.where(z > 0, z, _SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return _SELU_SCALE * np.where(z > 0, 1.0, _SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


# ------------------------------------------------------------------- init

def init_params(spec: DenseNetSpec, rng: np.random.Generator, zero_last: bool = False) -> ParamVector:
    """He-uniform (relu), LeCun-normal (selu) or Glorot-uniform (tanh) weights, zero biases."""
    chunks = []
    n_layers = len(spec.layer_dims())
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        if zero_last and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        elif spec.activation == "relu":
            lim = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        elif spec.activation == "selu":
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        chunks += [w.ravel(), np.zeros(fan_out)]
    return ParamVector(np.concatenate(chunks), spec.layout())


def unpack_layers(spec: DenseNetSpec, values: np.ndarray, offset: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``[(W0, b0), (W1, b1), ...]`` into a flat array starting at ``offset``."""
    layers = []
    pos = offset
    for a, b in spec.layer_dims():
        w = values[pos:pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((w, values[pos:pos + b]))
        pos += b
    return layers


# ------------------------------------------------------------ forward/backward

def forward_layers(spec: DenseNetSpec, layers, x: np.ndarray):
    """Batched forward pass returning ``(output, cache)`` for :func:`backward_layers`."""
    act = spec.activation
    w0, b0 = layers[0]
    pre = x @ w0 + b0
    if spec.residual:
        hs = [pre]
        h = pre
        for w, b in layers[1:-1]:
            h = h + _act(act, h) @ w + b
            hs.append(h)
        w, b = layers[-1]
        return h @ w + b, (x, hs)
    pres = [pre]
    h = _act(act, pre)
    for w, b in layers[1:-1]:
        pre = h @ w + b
        pres.append(pre)
        h = _act(act, pre)
    w, b = layers[-1]
    return h @ w + b, (x, pres)


def backward_layers(spec: DenseNetSpec, layers, cache, g_out: np.ndarray, want_input: bool = True):
    """Reverse pass of :func:`forward_layers`; returns ``(flat grads, grad_input)``."""
    act = spec.activation
    x, saved = cache
    grads = []
    w, b = layers[-1]
    if spec.residual:
        h = saved[-1]
        grads.append((h.T @ g_out, g_out.sum(axis=0)))
        g = g_out @ w.T
        for k in range(len(layers) - 2, 0, -1):
            wk, _ = layers[k]
            h_in = saved[k - 1]
            a = _act(act, h_in)
            grads.append((a.T @ g, g.sum(axis=0)))
            g = g + (g @ wk.T) * _act_grad(act, h_in)
    else:
        h = _act(act, saved[-1])
        grads.append((h.T @ g_out, g_out.sum(axis=0)))
        g = (g_out @ w.T) * _act_grad(act, saved[-1])
        for k in range(len(layers) - 2, 0, -1):
            wk, _ = layers[k]
            h_in = _act(act, saved[k - 1])
            grads.append((h_in.T @ g, g.sum(axis=0)))
            g = (g @ wk.T) * _act_grad(act, saved[k - 1])
    w0, _ = layers[0]
    grads.append((x.T @ g, g.sum(axis=0)))
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    g_in = g @ w0.T if want_input else None
    return flat, g_in


def _check(spec: DenseNetSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    if params.size != spec.n_params:
        raise ValueError(f"network expects {spec.n_params} parameters, got {params.size}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"network expects input dim {spec.input_dim}, got {x.shape[-1]}")
    return x


def net_forward(spec: DenseNetSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Output for a single input vector or a ``(batch, input_dim)`` array."""
    x = _check(spec, params, x)
    single = x.ndim == 1
    out, _ = forward_layers(spec, unpack_layers(spec, params.values), np.atleast_2d(x))
    return out[0] if single else out


def net_backward(spec: DenseNetSpec, params: ParamVector, x: np.ndarray, upstream: np.ndarray):
    """Gradients of ``<upstream, net(x)>`` w.r.t. the parameters and the input.

    For a batch the parameter gradient is summed over rows.
    """
    x = _check(spec, params, x)
    single = x.ndim == 1
    layers = unpack_layers(spec, params.values)
    _, cache = forward_layers(spec, layers, np.atleast_2d(x))
    g_out = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g_out.shape[-1] != spec.output_dim:
        raise ValueError(f"upstream gradient must have dim {spec.output_dim}")
    g_params, g_in = backward_layers(spec, layers, cache, g_out)
    return g_params, (g_in[0] if single else g_in)


# ------------------------------------------------------------------ optimizer

def adam_step(state: AdamState, params: ParamVector, grads: np.ndarray) -> tuple[AdamState, ParamVector]:
    """One Adam update with bias correction and decoupled weight decay."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError(
            f"non-finite gradient at {int(np.sum(~np.isfinite(grads)))} of {grads.size} entries"
        )
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    p = params.values
    new = p - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps))
    if state.weight_decay:
        new = new - state.lr * state.weight_decay * p
    return replace(state, m=m, v=v, step_count=t), params.with_values(new)
