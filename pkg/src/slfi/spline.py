"""Monotone rational-quadratic splines with linear (identity) tails.

The batched routines take unnormalized bin parameters laid out per element as
``[widths (K), heights (K), interior derivatives (K-1)]`` and broadcast over
any leading shape. Boundary derivatives are pinned to 1 so the spline joins
the identity tails smoothly, and all-zero parameters give the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accel

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(_DERIV_SHIFT) + MIN_DERIVATIVE == 1
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def n_spline_params(n_bins: int) -> int:
    return 3 * n_bins - 1


@dataclass(frozen=True)
class SplineSegmentParams:
    """Normalized spline for one coordinate: bin sizes and knot derivatives."""

    bin_widths: np.ndarray
    bin_heights: np.ndarray
    knot_derivs: np.ndarray
    tail_bound: float

    def __post_init__(self):
        w = np.asarray(self.bin_widths, dtype=np.float64)
        h = np.asarray(self.bin_heights, dtype=np.float64)
        d = np.asarray(self.knot_derivs, dtype=np.float64)
        if self.tail_bound <= 0:
            raise ValueError("tail_bound must be positive")
        if w.shape != h.shape or d.shape != (w.size + 1,):
            raise ValueError("need K widths, K heights and K+1 knot derivatives")
        if np.any(w <= 0) or np.any(h <= 0) or np.any(d <= 0):
            raise ValueError("widths, heights and derivatives must be positive")
        span = 2.0 * self.tail_bound
        object.__setattr__(self, "bin_widths", w * span / w.sum())
        object.__setattr__(self, "bin_heights", h * span / h.sum())
        object.__setattr__(self, "knot_derivs", d)

    @classmethod
    def identity(cls, n_bins: int, tail_bound: float) -> "SplineSegmentParams":
        return cls(np.ones(n_bins), np.ones(n_bins), np.ones(n_bins + 1), tail_bound)

    @classmethod
    def from_unnormalized(cls, raw: np.ndarray, tail_bound: float) -> "SplineSegmentParams":
        knots = _normalize(np.asarray(raw, dtype=np.float64), tail_bound)
        return cls(knots.widths, knots.heights, knots.derivs, tail_bound)


class _Knots:
    __slots__ = ("widths", "heights", "derivs", "cumw", "cumh", "sm_w", "sm_h", "sig_d")

    def __init__(self, widths, heights, derivs, sm_w=None, sm_h=None, sig_d=None):
        self.widths = widths
        self.heights = heights
        self.derivs = derivs
        self.cumw = _left_knots(widths)
        self.cumh = _left_knots(heights)
        self.sm_w = sm_w
        self.sm_h = sm_h
        self.sig_d = sig_d


def _left_knots(sizes: np.ndarray) -> np.ndarray:
    # left edge of every bin, starting at -B
    half = 0.5 * sizes.sum(axis=-1, keepdims=True)
    cum = np.cumsum(sizes, axis=-1) - sizes
    return cum - half


def _softmax(u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _normalize(raw: np.ndarray, tail_bound: float) -> _Knots:
    k = (raw.shape[-1] + 1) // 3
    span = 2.0 * tail_bound
    sm_w = _softmax(raw[..., :k])
    sm_h = _softmax(raw[..., k:2 * k])
    widths = span * (MIN_BIN_WIDTH + (1.0 - MIN_BIN_WIDTH * k) * sm_w)
    heights = span * (MIN_BIN_HEIGHT + (1.0 - MIN_BIN_HEIGHT * k) * sm_h)
    z = raw[..., 2 * k:] + _DERIV_SHIFT
    inner = MIN_DERIVATIVE + np.logaddexp(0.0, z)
    ones = np.ones(raw.shape[:-1] + (1,))
    derivs = np.concatenate([ones, inner, ones], axis=-1)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _Knots(widths, heights, derivs, sm_w, sm_h, sig)


def _from_segment(seg: SplineSegmentParams) -> _Knots:
    return _Knots(seg.bin_widths, seg.bin_heights, seg.knot_derivs)


def _gather(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]


def _bin_index(v: np.ndarray, left: np.ndarray) -> np.ndarray:
    return np.sum(v[..., None] >= left[..., 1:], axis=-1)


def _forward_core(x, kn: _Knots, bound: float):
    inside = np.abs(x) <= bound
    xc = np.where(inside, x, 0.0)
    idx = _bin_index(xc, kn.cumw)
    xk = _gather(kn.cumw, idx)
    wk = _gather(kn.widths, idx)
    yk = _gather(kn.cumh, idx)
    hk = _gather(kn.heights, idx)
    dk = _gather(kn.derivs, idx)
    dk1 = _gather(kn.derivs, idx + 1)
    xi = np.clip((xc - xk) / wk, 0.0, 1.0)
    s = hk / wk
    t = xi * (1.0 - xi)
    c1 = dk1 + dk - 2.0 * s
    den = s + c1 * t
    num = hk * (s * xi * xi + dk * t)
    ratio = num / den
    poly = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) ** 2
    y = np.where(inside, yk + ratio, x)
    logdet = np.where(inside, 2.0 * np.log(s) + np.log(poly) - 2.0 * np.log(den), 0.0)
    cache = (inside, idx, xi, s, t, c1, den, ratio, poly, wk, hk, dk)
    return y, logdet, cache


def _inverse_core(y, kn: _Knots, bound: float):
    inside = np.abs(y) <= bound
    yc = np.where(inside, y, 0.0)
    idx = _bin_index(yc, kn.cumh)
    xk = _gather(kn.cumw, idx)
    wk = _gather(kn.widths, idx)
    yk = _gather(kn.cumh, idx)
    hk = _gather(kn.heights, idx)
    dk = _gather(kn.derivs, idx)
    dk1 = _gather(kn.derivs, idx + 1)
    s = hk / wk
    c1 = dk1 + dk - 2.0 * s
    dy = yc - yk
    a = hk * (s - dk) + dy * c1
    b = hk * dk - dy * c1
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = np.clip(2.0 * c / (-b - np.sqrt(disc)), 0.0, 1.0)
    t = xi * (1.0 - xi)
    den = s + c1 * t
    poly = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) ** 2
    x = np.where(inside, xi * wk + xk, y)
    logdet = np.where(inside, -(2.0 * np.log(s) + np.log(poly) - 2.0 * np.log(den)), 0.0)
    return x, logdet


_NO_CACHE = np.empty((0, 0))


def _flat(v, raw):
    v = np.asarray(v, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    return v.shape, np.ascontiguousarray(v.reshape(-1)), np.ascontiguousarray(raw.reshape(v.size, raw.shape[-1]))


def rq_forward(x: np.ndarray, raw: np.ndarray, tail_bound: float):
    """Forward spline of ``x`` (shape ``S``) with raw params of shape ``S + (3K-1,)``."""
    if accel.use_numba():
        from . import _nb

        shape, xf, rf = _flat(x, raw)
        y, ld = _nb.rq_forward(xf, rf, float(tail_bound), (rf.shape[1] + 1) // 3, _NO_CACHE)
        return y.reshape(shape), ld.reshape(shape)
    y, logdet, _ = _forward_core(np.asarray(x, dtype=np.float64), _normalize(raw, tail_bound), tail_bound)
    return y, logdet


def rq_inverse(y: np.ndarray, raw: np.ndarray, tail_bound: float):
    if accel.use_numba():
        from . import _nb

        shape, yf, rf = _flat(y, raw)
        x, ld = _nb.rq_inverse(yf, rf, float(tail_bound), (rf.shape[1] + 1) // 3)
        return x.reshape(shape), ld.reshape(shape)
    return _inverse_core(np.asarray(y, dtype=np.float64), _normalize(raw, tail_bound), tail_bound)


def rq_forward_with_grad(x: np.ndarray, raw: np.ndarray, tail_bound: float):
    """Forward spline plus a closure computing input and raw-parameter gradients.

    The closure takes upstream gradients ``(g_y, g_logdet)`` and returns
    ``(g_x, g_raw)``.
    """
    if accel.use_numba():
        return _rq_forward_with_grad_nb(x, raw, tail_bound)
    kn = _normalize(raw, tail_bound)
    y, logdet, cache = _forward_core(x, kn, tail_bound)

    def backward(g_y: np.ndarray, g_ld: np.ndarray):
        inside, idx, xi, s, t, c1, den, ratio, poly, wk, hk, dk = cache
        dk1 = c1 - dk + 2.0 * s
        one_2xi = 1.0 - 2.0 * xi
        # d(ratio)/d(.) and d(logdet)/d(.) for the local variables
        gr_xi = (hk * (2.0 * s * xi + dk * one_2xi) - ratio * c1 * one_2xi) / den
        gr_s = (hk * xi * xi - ratio * (1.0 - 2.0 * t)) / den
        gr_dk = (hk * t - ratio * t) / den
        gr_dk1 = -ratio * t / den
        gr_hk = (s * xi * xi + dk * t) / den
        gl_xi = (2.0 * dk1 * xi + 2.0 * s * one_2xi - 2.0 * dk * (1.0 - xi)) / poly - 2.0 * c1 * one_2xi / den
        gl_s = 2.0 / s + 2.0 * t / poly - 2.0 * (1.0 - 2.0 * t) / den
        gl_dk = (1.0 - xi) ** 2 / poly - 2.0 * t / den
        gl_dk1 = xi * xi / poly - 2.0 * t / den

        m = inside.astype(np.float64)
        gy = g_y * m
        gl = g_ld * m
        G_xi = gy * gr_xi + gl * gl_xi
        G_s = gy * gr_s + gl * gl_s
        G_dk = gy * gr_dk + gl * gl_dk
        G_dk1 = gy * gr_dk1 + gl * gl_dk1
        G_hk = gy * gr_hk + G_s / wk
        G_yk = gy
        G_wk = -(G_xi * xi + G_s * s) / wk
        G_xk = -G_xi / wk
        g_x = np.where(inside, G_xi / wk, g_y)

        k = kn.widths.shape[-1]
        bins = np.arange(k)
        onehot = (bins == idx[..., None]).astype(np.float64)
        before = (bins < idx[..., None]).astype(np.float64)
        g_w = onehot * G_wk[..., None] + before * G_xk[..., None]
        g_h = onehot * G_hk[..., None] + before * G_yk[..., None]
        # left knot = cumsum - total/2, so each size also shifts every knot by -1/2
        g_w -= 0.5 * G_xk[..., None]
        g_h -= 0.5 * G_yk[..., None]
        g_d = onehot * G_dk[..., None]
        g_d_next = onehot * G_dk1[..., None]
        # derivs index k and k+1; only interior knots 1..K-1 are free
        g_inner = g_d[..., 1:] + g_d_next[..., :-1]

        span = 2.0 * tail_bound
        g_pw = g_w * span * (1.0 - MIN_BIN_WIDTH * k)
        g_ph = g_h * span * (1.0 - MIN_BIN_HEIGHT * k)
        g_uw = kn.sm_w * (g_pw - np.sum(kn.sm_w * g_pw, axis=-1, keepdims=True))
        g_uh = kn.sm_h * (g_ph - np.sum(kn.sm_h * g_ph, axis=-1, keepdims=True))
        g_ud = g_inner * kn.sig_d
        return g_x, np.concatenate([g_uw, g_uh, g_ud], axis=-1)

    return y, logdet, backward


def _rq_forward_with_grad_nb(x, raw, tail_bound):
    from . import _nb

    shape, xf, rf = _flat(x, raw)
    k = (rf.shape[1] + 1) // 3
    bound = float(tail_bound)
    sm = np.empty((xf.size, 2 * k))
    y, ld = _nb.rq_forward(xf, rf, bound, k, sm)

    def backward(g_y, g_ld):
        gy = np.ascontiguousarray(np.broadcast_to(g_y, shape).reshape(-1), dtype=np.float64)
        gl = np.ascontiguousarray(np.broadcast_to(g_ld, shape).reshape(-1), dtype=np.float64)
        g_x, g_raw = _nb.rq_forward_grad(xf, rf, bound, k, sm, gy, gl)
        return g_x.reshape(shape), g_raw.reshape(shape + (rf.shape[1],))

    return y.reshape(shape), ld.reshape(shape), backward


def rq_spline_apply(x: float, seg: SplineSegmentParams, direction: str = "forward") -> tuple[float, float]:
    """Apply one normalized spline to a scalar; returns ``(y, log|dy/dx|)``."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("spline input must be finite")
    kn = _from_segment(seg)
    arr = np.array([x])
    if direction == "forward":
        kn1 = _Knots(kn.widths[None], kn.heights[None], kn.derivs[None])
        y, ld, _ = _forward_core(arr, kn1, seg.tail_bound)
    elif direction == "inverse":
        kn1 = _Knots(kn.widths[None], kn.heights[None], kn.derivs[None])
        y, ld = _inverse_core(arr, kn1, seg.tail_bound)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return float(y[0]), float(ld[0])
