"""numba kernels. Each function mirrors a numpy implementation elsewhere.

Parallel loops only write per-row outputs; reductions over rows happen
afterwards in a fixed order so results do not depend on the thread count.
"""

import math

import numpy as np
from numba import njit, prange

from .spline import MIN_BIN_HEIGHT, MIN_BIN_WIDTH, MIN_DERIVATIVE, _DERIV_SHIFT


@njit(cache=True, fastmath=True, inline="always")
def _softmax_into(raw, off, k, out):
    mx = raw[off]
    for i in range(1, k):
        if raw[off + i] > mx:
            mx = raw[off + i]
    tot = 0.0
    for i in range(k):
        out[i] = math.exp(raw[off + i] - mx)
        tot += out[i]
    inv = 1.0 / tot
    for i in range(k):
        out[i] *= inv


@njit(cache=True, inline="always")
def _sizes(sm, k, span, min_size, out):
    scale = span * (1.0 - min_size * k)
    for i in range(k):
        out[i] = span * min_size + scale * sm[i]


@njit(cache=True, inline="always")
def _deriv(row, k, j):
    # knot derivative j in 0..K; boundary knots are pinned to 1
    if j == 0 or j == k:
        return 1.0, 0.0
    z = row[2 * k + j - 1] + _DERIV_SHIFT
    if z > 0:
        sp = z + math.log1p(math.exp(-z))
    else:
        sp = math.log1p(math.exp(z))
    return MIN_DERIVATIVE + sp, 1.0 / (1.0 + math.exp(-z))


@njit(cache=True, inline="always")
def _left(sizes, k, b):
    # left edge of bin b using sum_{j<b} s_j - total/2
    tot = 0.0
    for i in range(k):
        tot += sizes[i]
    left = -0.5 * tot
    for i in range(b):
        left += sizes[i]
    return left


@njit(cache=True, inline="always")
def _bin(v, sizes, k):
    tot = 0.0
    for i in range(k):
        tot += sizes[i]
    half = 0.5 * tot
    cum = 0.0
    b = 0
    for i in range(1, k):
        cum += sizes[i - 1]
        if v >= cum - half:
            b = i
        else:
            break
    return b


@njit(cache=True)
def rq_forward(x, raw, bound, k, sm_out):
    """Forward pass; stores width/height softmaxes in ``sm_out`` (n, 2K) for the gradient."""
    n = x.shape[0]
    y = np.empty(n)
    ld = np.empty(n)
    span = 2.0 * bound
    w = np.empty(k)
    h = np.empty(k)
    keep = sm_out.shape[0] == n
    sm_w = np.empty(k)
    sm_h = np.empty(k)
    for e in range(n):
        xv = x[e]
        if xv < -bound or xv > bound:
            y[e] = xv
            ld[e] = 0.0
            continue
        row = raw[e]
        _softmax_into(row, 0, k, sm_w)
        _softmax_into(row, k, k, sm_h)
        if keep:
            for i in range(k):
                sm_out[e, i] = sm_w[i]
                sm_out[e, k + i] = sm_h[i]
        _sizes(sm_w, k, span, MIN_BIN_WIDTH, w)
        _sizes(sm_h, k, span, MIN_BIN_HEIGHT, h)
        b = _bin(xv, w, k)
        xk = _left(w, k, b)
        yk = _left(h, k, b)
        dk, _ = _deriv(row, k, b)
        dk1, _ = _deriv(row, k, b + 1)
        wk = w[b]
        hk = h[b]
        xi = (xv - xk) / wk
        xi = min(max(xi, 0.0), 1.0)
        s = hk / wk
        t = xi * (1.0 - xi)
        c1 = dk1 + dk - 2.0 * s
        den = s + c1 * t
        num = hk * (s * xi * xi + dk * t)
        poly = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) ** 2
        y[e] = yk + num / den
        ld[e] = 2.0 * math.log(s) + math.log(poly) - 2.0 * math.log(den)
    return y, ld


@njit(cache=True)
def rq_inverse(y, raw, bound, k):
    n = y.shape[0]
    x = np.empty(n)
    ld = np.empty(n)
    span = 2.0 * bound
    w = np.empty(k)
    h = np.empty(k)
    sm = np.empty(k)
    for e in range(n):
        yv = y[e]
        if yv < -bound or yv > bound:
            x[e] = yv
            ld[e] = 0.0
            continue
        row = raw[e]
        _softmax_into(row, 0, k, sm)
        _sizes(sm, k, span, MIN_BIN_WIDTH, w)
        _softmax_into(row, k, k, sm)
        _sizes(sm, k, span, MIN_BIN_HEIGHT, h)
        b = _bin(yv, h, k)
        yk = _left(h, k, b)
        xk = _left(w, k, b)
        dk, _ = _deriv(row, k, b)
        dk1, _ = _deriv(row, k, b + 1)
        wk = w[b]
        hk = h[b]
        s = hk / wk
        c1 = dk1 + dk - 2.0 * s
        dy = yv - yk
        a = hk * (s - dk) + dy * c1
        bb = hk * dk - dy * c1
        c = -s * dy
        disc = max(bb * bb - 4.0 * a * c, 0.0)
        xi = 2.0 * c / (-bb - math.sqrt(disc))
        xi = min(max(xi, 0.0), 1.0)
        t = xi * (1.0 - xi)
        den = s + c1 * t
        poly = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) ** 2
        x[e] = xi * wk + xk
        ld[e] = -(2.0 * math.log(s) + math.log(poly) - 2.0 * math.log(den))
    return x, ld


@njit(cache=True)
def rq_forward_grad(x, raw, bound, k, sm_in, g_y, g_ld):
    """Input and raw-parameter gradients, reusing softmaxes saved by :func:`rq_forward`."""
    n = x.shape[0]
    p = raw.shape[1]
    g_x = np.empty(n)
    g_raw = np.zeros((n, p))
    span = 2.0 * bound
    cw = span * (1.0 - MIN_BIN_WIDTH * k)
    ch = span * (1.0 - MIN_BIN_HEIGHT * k)
    w = np.empty(k)
    h = np.empty(k)
    for e in range(n):
        xv = x[e]
        if xv < -bound or xv > bound:
            g_x[e] = g_y[e]
            continue
        row = raw[e]
        sm_w = sm_in[e, :k]
        sm_h = sm_in[e, k:]
        _sizes(sm_w, k, span, MIN_BIN_WIDTH, w)
        _sizes(sm_h, k, span, MIN_BIN_HEIGHT, h)
        b = _bin(xv, w, k)
        xk = _left(w, k, b)
        dk, sig0 = _deriv(row, k, b)
        dk1, sig1 = _deriv(row, k, b + 1)
        wk = w[b]
        hk = h[b]
        xi = (xv - xk) / wk
        xi = min(max(xi, 0.0), 1.0)
        s = hk / wk
        t = xi * (1.0 - xi)
        c1 = dk1 + dk - 2.0 * s
        den = s + c1 * t
        ratio = hk * (s * xi * xi + dk * t) / den
        poly = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) ** 2
        o2 = 1.0 - 2.0 * xi

        gy = g_y[e]
        gl = g_ld[e]
        G_xi = gy * (hk * (2.0 * s * xi + dk * o2) - ratio * c1 * o2) / den + gl * (
            (2.0 * dk1 * xi + 2.0 * s * o2 - 2.0 * dk * (1.0 - xi)) / poly - 2.0 * c1 * o2 / den
        )
        G_s = gy * (hk * xi * xi - ratio * (1.0 - 2.0 * t)) / den + gl * (
            2.0 / s + 2.0 * t / poly - 2.0 * (1.0 - 2.0 * t) / den
        )
        G_dk = gy * (hk * t - ratio * t) / den + gl * ((1.0 - xi) ** 2 / poly - 2.0 * t / den)
        G_dk1 = gy * (-ratio * t / den) + gl * (xi * xi / poly - 2.0 * t / den)
        G_hk = gy * (s * xi * xi + dk * t) / den + G_s / wk
        G_yk = gy
        G_wk = -(G_xi * xi + G_s * s) / wk
        G_xk = -G_xi / wk
        g_x[e] = G_xi / wk

        # d(size_i): -1/2 shift of every left knot, +1 for bins left of b, own size at b
        dot_w = 0.0
        dot_h = 0.0
        for i in range(k):
            vw = -0.5 * G_xk
            vh = -0.5 * G_yk
            if i < b:
                vw += G_xk
                vh += G_yk
            elif i == b:
                vw += G_wk
                vh += G_hk
            g_raw[e, i] = vw * cw
            g_raw[e, k + i] = vh * ch
            dot_w += sm_w[i] * vw * cw
            dot_h += sm_h[i] * vh * ch
        for i in range(k):
            g_raw[e, i] = sm_w[i] * (g_raw[e, i] - dot_w)
            g_raw[e, k + i] = sm_h[i] * (g_raw[e, k + i] - dot_h)
        # interior derivative j (1..K-1) sits at raw[2K + j - 1]
        if b >= 1:
            g_raw[e, 2 * k + b - 1] += G_dk * sig0
        if b + 1 <= k - 1:
            g_raw[e, 2 * k + b] += G_dk1 * sig1
    return g_x, g_raw


# ----------------------------------------------------------------- MMD

@njit(cache=True, parallel=True)
def gauss_kernel_row_sums(a, b, inv_two_s2, skip_diag):
    n = a.shape[0]
    m = b.shape[0]
    dim = a.shape[1]
    out = np.empty(n)
    for i in prange(n):
        acc = 0.0
        for j in range(m):
            if skip_diag and i == j:
                continue
            d2 = 0.0
            for c in range(dim):
                diff = a[i, c] - b[j, c]
                d2 += diff * diff
            acc += math.exp(-d2 * inv_two_s2)
        out[i] = acc
    return out


# ------------------------------------------------------------ simulators

@njit(cache=True)
def mg1_inter_departures(theta, u_service, e_arrival):
    n, n_jobs = u_service.shape
    out = np.empty((n, n_jobs))
    for r in range(n):
        lo = theta[r, 0]
        width = theta[r, 1]
        rate = theta[r, 2]
        v = 0.0
        dep = 0.0
        for i in range(n_jobs):
            s = lo + width * u_service[r, i]
            v += e_arrival[r, i] / rate
            idle = v - dep
            if idle < 0.0:
                idle = 0.0
            inc = s + idle
            dep += inc
            out[r, i] = inc
    return out


@njit(cache=True, inline="always")
def _clv_rhs(x, r, alpha, out):
    ns = x.shape[0]
    for s in range(ns):
        acc = 0.0
        for q in range(ns):
            acc += alpha[s, q] * x[q]
        out[s] = r[s] * x[s] * (1.0 - acc)


@njit(cache=True)
def clv_rk4(x0, r, alphas, dt, n_steps, blowup):
    """RK4 trajectories for a batch of interaction matrices; NaN row marks blow-up."""
    n = alphas.shape[0]
    ns = x0.shape[0]
    traj = np.empty((n, n_steps, ns))
    k1 = np.empty(ns)
    k2 = np.empty(ns)
    k3 = np.empty(ns)
    k4 = np.empty(ns)
    tmp = np.empty(ns)
    x = np.empty(ns)
    for b in range(n):
        alpha = alphas[b]
        for s in range(ns):
            x[s] = x0[s]
        bad = False
        for step in range(n_steps):
            _clv_rhs(x, r, alpha, k1)
            for s in range(ns):
                tmp[s] = x[s] + 0.5 * dt * k1[s]
            _clv_rhs(tmp, r, alpha, k2)
            for s in range(ns):
                tmp[s] = x[s] + 0.5 * dt * k2[s]
            _clv_rhs(tmp, r, alpha, k3)
            for s in range(ns):
                tmp[s] = x[s] + dt * k3[s]
            _clv_rhs(tmp, r, alpha, k4)
            for s in range(ns):
                v = x[s] + dt / 6.0 * (k1[s] + 2.0 * k2[s] + 2.0 * k3[s] + k4[s])
                if v < 0.0:
                    v = 0.0
                if not (abs(v) <= blowup):
                    bad = True
                x[s] = v
                traj[b, step, s] = v
            if bad:
                for st in range(step, n_steps):
                    for s in range(ns):
                        traj[b, st, s] = np.nan
                break
    return traj
