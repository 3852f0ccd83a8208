"""Hot inner loops, each with a numba kernel and a numpy twin.

The public functions dispatch on :data:`replayguard._accel.USE_NUMBA`.
Both paths are deterministic: every output element is accumulated by a
single loop in a fixed order.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# 3x3 convolution, padding 1, stride 1 or 2.
#
# Numba path: the zero-padded input is rearranged into "phase planes" of
# width ``Wq`` so that every tap (ky, kx) becomes a constant offset into one
# flat plane.  Stride 1 has a single phase (the padded input); stride 2 has
# four (even/odd rows x even/odd columns).  Output position (y, x) maps to
# flat index y * Wq + x; the columns x >= Wo are scratch and get cropped.
# Loops run over chunks of the flat index so the working set stays in cache.

_CHUNK = 2048


def _plane_geometry(H, W, stride):
    Ho, Wo = conv_out_size(H, stride), conv_out_size(W, stride)
    if stride == 1:
        Wq = W + 2
        taps = [(0, ky * Wq + kx) for ky in range(3) for kx in range(3)]
        R = H + 3  # one slack row for the scratch columns of the last row
        nph = 1
    else:
        Wq = Wo + 1
        R = Ho + 2
        taps = [((ky % 2) * 2 + kx % 2, (ky // 2) * Wq + kx // 2) for ky in range(3) for kx in range(3)]
        nph = 4
    ph = np.array([t[0] for t in taps], dtype=np.int64)
    off = np.array([t[1] for t in taps], dtype=np.int64)
    return Ho, Wo, Wq, R, nph, ph, off


def _to_planes(x, stride, Wq, R, nph):
    B, C, H, W = x.shape
    P = np.zeros((B, C, nph, R, Wq), dtype=x.dtype)
    if stride == 1:
        P[:, :, 0, 1 : H + 1, 1 : W + 1] = x
    else:
        xp = pad1(x)
        for rp in range(2):
            for cp in range(2):
                v = xp[:, :, rp::2, cp::2]
                P[:, :, rp * 2 + cp, : v.shape[2], : v.shape[3]] = v
    return P.reshape(B, C, nph, R * Wq)


def _from_planes(P, stride, H, W, Wq, R):
    B, C, nph = P.shape[:3]
    P = P.reshape(B, C, nph, R, Wq)
    if stride == 1:
        return np.ascontiguousarray(P[:, :, 0, 1 : H + 1, 1 : W + 1])
    xp = np.zeros((B, C, H + 2, W + 2), dtype=P.dtype)
    for rp in range(2):
        for cp in range(2):
            v = xp[:, :, rp::2, cp::2]
            v[...] = P[:, :, rp * 2 + cp, : v.shape[2], : v.shape[3]]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


@njit(fastmath=True)
def _conv_planes_fwd_nb(P, w, ph, off, n, out):
    # out: (B, Co, n) flat with n = Ho * Wq
    B, Ci = P.shape[0], P.shape[1]
    Co = w.shape[0]
    for b in range(B):
        for j0 in range(0, n, _CHUNK):
            j1 = min(j0 + _CHUNK, n)
            m = j1 - j0
            for ci in range(Ci):
                pl = P[b, ci]
                v0 = pl[ph[0], j0 + off[0] : j1 + off[0]]
                v1 = pl[ph[1], j0 + off[1] : j1 + off[1]]
                v2 = pl[ph[2], j0 + off[2] : j1 + off[2]]
                v3 = pl[ph[3], j0 + off[3] : j1 + off[3]]
                v4 = pl[ph[4], j0 + off[4] : j1 + off[4]]
                v5 = pl[ph[5], j0 + off[5] : j1 + off[5]]
                v6 = pl[ph[6], j0 + off[6] : j1 + off[6]]
                v7 = pl[ph[7], j0 + off[7] : j1 + off[7]]
                v8 = pl[ph[8], j0 + off[8] : j1 + off[8]]
                for co in range(Co):
                    o = out[b, co, j0:j1]
                    k = w[co, ci]
                    k0, k1, k2, k3, k4, k5, k6, k7, k8 = k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]
                    for j in range(m):
                        o[j] += (
                            k0 * v0[j] + k1 * v1[j] + k2 * v2[j]
                            + k3 * v3[j] + k4 * v4[j] + k5 * v5[j]
                            + k6 * v6[j] + k7 * v7[j] + k8 * v8[j]
                        )


@njit(fastmath=True)
def _conv_planes_bwd_weight_nb(P, g, ph, off, n, dw):
    # g: (B, Co, n) flat output gradient, zero in the scratch columns
    B, Ci = P.shape[0], P.shape[1]
    Co = g.shape[1]
    zero = dw.dtype.type(0)
    for b in range(B):
        for j0 in range(0, n, _CHUNK):
            j1 = min(j0 + _CHUNK, n)
            m = j1 - j0
            for ci in range(Ci):
                pl = P[b, ci]
                v0 = pl[ph[0], j0 + off[0] : j1 + off[0]]
                v1 = pl[ph[1], j0 + off[1] : j1 + off[1]]
                v2 = pl[ph[2], j0 + off[2] : j1 + off[2]]
                v3 = pl[ph[3], j0 + off[3] : j1 + off[3]]
                v4 = pl[ph[4], j0 + off[4] : j1 + off[4]]
                v5 = pl[ph[5], j0 + off[5] : j1 + off[5]]
                v6 = pl[ph[6], j0 + off[6] : j1 + off[6]]
                v7 = pl[ph[7], j0 + off[7] : j1 + off[7]]
                v8 = pl[ph[8], j0 + off[8] : j1 + off[8]]
                for co in range(Co):
                    gg = g[b, co, j0:j1]
                    t0 = t1 = t2 = t3 = t4 = t5 = t6 = t7 = t8 = zero
                    for j in range(m):
                        e = gg[j]
                        t0 += e * v0[j]
                        t1 += e * v1[j]
                        t2 += e * v2[j]
                        t3 += e * v3[j]
                        t4 += e * v4[j]
                        t5 += e * v5[j]
                        t6 += e * v6[j]
                        t7 += e * v7[j]
                        t8 += e * v8[j]
                    k = dw[co, ci]
                    k[0] += t0
                    k[1] += t1
                    k[2] += t2
                    k[3] += t3
                    k[4] += t4
                    k[5] += t5
                    k[6] += t6
                    k[7] += t7
                    k[8] += t8


@njit(fastmath=True)
def _conv_planes_bwd_input_s1_nb(gq, w, off, pad, N, dP):
    # stride 1 gather form: dP[i] = sum_t w_t * g[i - off_t]; gq is g shifted right by ``pad``
    B, Co = gq.shape[0], gq.shape[1]
    Ci = w.shape[1]
    for b in range(B):
        for i0 in range(0, N, _CHUNK):
            i1 = min(i0 + _CHUNK, N)
            m = i1 - i0
            for co in range(Co):
                gr = gq[b, co]
                u0 = gr[pad - off[0] + i0 : pad - off[0] + i1]
                u1 = gr[pad - off[1] + i0 : pad - off[1] + i1]
                u2 = gr[pad - off[2] + i0 : pad - off[2] + i1]
                u3 = gr[pad - off[3] + i0 : pad - off[3] + i1]
                u4 = gr[pad - off[4] + i0 : pad - off[4] + i1]
                u5 = gr[pad - off[5] + i0 : pad - off[5] + i1]
                u6 = gr[pad - off[6] + i0 : pad - off[6] + i1]
                u7 = gr[pad - off[7] + i0 : pad - off[7] + i1]
                u8 = gr[pad - off[8] + i0 : pad - off[8] + i1]
                for ci in range(Ci):
                    d = dP[b, ci, 0, i0:i1]
                    k = w[co, ci]
                    k0, k1, k2, k3, k4, k5, k6, k7, k8 = k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]
                    for j in range(m):
                        d[j] += (
                            k0 * u0[j] + k1 * u1[j] + k2 * u2[j]
                            + k3 * u3[j] + k4 * u4[j] + k5 * u5[j]
                            + k6 * u6[j] + k7 * u7[j] + k8 * u8[j]
                        )


@njit(fastmath=True)
def _conv_planes_bwd_input_nb(g, w, ph, off, n, dP):
    # scatter form, one tap at a time (used for stride 2)
    B, Co = g.shape[0], g.shape[1]
    Ci = w.shape[1]
    for b in range(B):
        for j0 in range(0, n, _CHUNK):
            j1 = min(j0 + _CHUNK, n)
            m = j1 - j0
            for ci in range(Ci):
                dpl = dP[b, ci]
                for co in range(Co):
                    gg = g[b, co, j0:j1]
                    for t in range(9):
                        wv = w[co, ci, t]
                        v = dpl[ph[t], j0 + off[t] : j1 + off[t]]
                        for j in range(m):
                            v[j] += wv * gg[j]


def _tap(xp, ky, kx, stride, Ho, Wo):
    # (Ci, B * Ho * Wo) matrix of the input pixels seen by tap (ky, kx)
    v = xp[:, :, ky : ky + stride * (Ho - 1) + 1 : stride, kx : kx + stride * (Wo - 1) + 1 : stride]
    return v.transpose(1, 0, 2, 3).reshape(xp.shape[1], -1)


def _conv3x3_fwd_np(xp, w, stride, out):
    B, Co, Ho, Wo = out.shape
    acc = np.zeros((Co, B * Ho * Wo), dtype=out.dtype)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    for ky in range(3):
        for kx in range(3):
            acc += taps[ky, kx] @ _tap(xp, ky, kx, stride, Ho, Wo)
    out += acc.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3)


def _conv3x3_bwd_input_np(dy, w, stride, dxp):
    B, Co, Ho, Wo = dy.shape
    Ci = w.shape[1]
    g = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(Co, -1)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for ky in range(3):
        for kx in range(3):
            d = (taps[ky, kx] @ g).reshape(Ci, B, Ho, Wo).transpose(1, 0, 2, 3)
            dxp[:, :, ky : ky + stride * (Ho - 1) + 1 : stride, kx : kx + stride * (Wo - 1) + 1 : stride] += d


def _conv3x3_bwd_weight_np(xp, dy, stride, dw):
    B, Co, Ho, Wo = dy.shape
    g = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(Co, -1)
    for ky in range(3):
        for kx in range(3):
            dw[:, :, ky, kx] += g @ _tap(xp, ky, kx, stride, Ho, Wo).T


def pad1(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def conv_out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


# above this Ci*Co the BLAS tap-matmul path beats the direct loops
GEMM_MIN_CHANNEL_PRODUCT = 1024


def _direct(w) -> bool:
    return _accel.USE_NUMBA and w.shape[0] * w.shape[1] < GEMM_MIN_CHANNEL_PRODUCT


def conv3x3_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """3x3 convolution with zero padding 1 and no bias.

    Returns ``(y, cache)``; the cache holds the rearranged input needed by
    :func:`conv3x3_backward`.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    B, _, H, W = x.shape
    Co = w.shape[0]
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if _direct(w):
        Ho, Wo, Wq, R, nph, ph, off = _plane_geometry(H, W, stride)
        P = _to_planes(x, stride, Wq, R, nph)
        n = Ho * Wq
        flat = np.zeros((B, Co, n), dtype=x.dtype)
        _conv_planes_fwd_nb(P, w.reshape(Co, -1, 9), ph, off, n, flat)
        out = np.ascontiguousarray(flat.reshape(B, Co, Ho, Wq)[..., :Wo])
        return out, ("planes", P, x.shape)
    xp = pad1(x)
    out = np.zeros((B, Co, conv_out_size(H, stride), conv_out_size(W, stride)), dtype=x.dtype)
    _conv3x3_fwd_np(xp, w, stride, out)
    return out, ("padded", xp, x.shape)


def conv3x3_backward(dy: np.ndarray, cache, w: np.ndarray, stride: int = 1):
    """Gradients ``(dx, dw)`` of :func:`conv3x3_forward`."""
    kind, arr, xshape = cache
    B, Ci, H, W = xshape
    Co = w.shape[0]
    w = np.ascontiguousarray(w, dtype=dy.dtype)
    if kind == "planes":
        Ho, Wo, Wq, R, nph, ph, off = _plane_geometry(H, W, stride)
        n = Ho * Wq
        g = np.zeros((B, Co, Ho, Wq), dtype=dy.dtype)
        g[..., :Wo] = dy
        g = g.reshape(B, Co, n)
        dw = np.zeros((Co, Ci, 9), dtype=dy.dtype)
        _conv_planes_bwd_weight_nb(arr, g, ph, off, n, dw)
        dP = np.zeros_like(arr)
        if stride == 1:
            N = arr.shape[-1]
            pad = int(off.max())
            gq = np.zeros((B, Co, pad + N), dtype=dy.dtype)
            gq[:, :, pad : pad + n] = g
            _conv_planes_bwd_input_s1_nb(gq, w.reshape(Co, Ci, 9), off, pad, N, dP)
        else:
            _conv_planes_bwd_input_nb(g, w.reshape(Co, Ci, 9), ph, off, n, dP)
        return _from_planes(dP, stride, H, W, Wq, R), dw.reshape(Co, Ci, 3, 3)
    dy = np.ascontiguousarray(dy)
    dw = np.zeros(w.shape, dtype=dy.dtype)
    dxp = np.zeros_like(arr)
    _conv3x3_bwd_input_np(dy, w, stride, dxp)
    _conv3x3_bwd_weight_np(arr, dy, stride, dw)
    return dxp[:, :, 1:-1, 1:-1], dw


# ---------------------------------------------------------------------------
# Batch norm (optionally fused with a trailing ReLU).  Statistics accumulate
# in float64 in a fixed loop order.


@njit
def _bn_stats_nb(x):
    B, C, H, W = x.shape
    mean = np.zeros(C)
    var = np.zeros(C)
    n = B * H * W
    for c in range(C):
        s = 0.0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    s += x[b, c, i, j]
        m = s / n
        q = 0.0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    d = x[b, c, i, j] - m
                    q += d * d
        mean[c] = m
        var[c] = q / n
    return mean, var


@njit(fastmath=True)
def _bn_apply_nb(x, mean, inv, gamma, beta, relu, xhat, y):
    B, C, H, W = x.shape
    for b in range(B):
        for c in range(C):
            m = mean[c]
            s = inv[c]
            g = gamma[c]
            t = beta[c]
            for i in range(H):
                for j in range(W):
                    h = (x[b, c, i, j] - m) * s
                    xhat[b, c, i, j] = h
                    v = h * g + t
                    if relu and v < 0:
                        v = 0.0
                    y[b, c, i, j] = v


@njit
def _bn_grad_sums_nb(dy, xhat, y, relu):
    B, C, H, W = dy.shape
    dbeta = np.zeros(C)
    dgamma = np.zeros(C)
    for c in range(C):
        sb = 0.0
        sg = 0.0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    g = dy[b, c, i, j]
                    if relu and y[b, c, i, j] <= 0:
                        g = 0.0
                    sb += g
                    sg += g * xhat[b, c, i, j]
        dbeta[c] = sb
        dgamma[c] = sg
    return dgamma, dbeta


@njit(fastmath=True)
def _bn_dx_nb(dy, xhat, y, relu, scale, dgamma, dbeta, n, dx):
    B, C, H, W = dy.shape
    for b in range(B):
        for c in range(C):
            s = scale[c]
            mg = dgamma[c]
            mb = dbeta[c]
            for i in range(H):
                for j in range(W):
                    g = dy[b, c, i, j]
                    if relu and y[b, c, i, j] <= 0:
                        g = 0.0
                    dx[b, c, i, j] = s * (n * g - mb - xhat[b, c, i, j] * mg)


def bn_train_forward(x, gamma, beta, eps, relu):
    """Batch-statistics normalisation.  Returns ``(y, xhat, mean, var, inv)``."""
    if _accel.USE_NUMBA:
        mean, var = _bn_stats_nb(x)
    else:
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        xc = x - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3), dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    y, xhat = bn_apply(x, mean, inv, gamma, beta, relu, keep_xhat=True)
    return y, xhat, mean, var, inv


def bn_apply(x, mean, inv, gamma, beta, relu, keep_xhat=False):
    dt = x.dtype
    if _accel.USE_NUMBA:
        xhat = np.empty_like(x)
        y = np.empty_like(x)
        _bn_apply_nb(np.ascontiguousarray(x), mean.astype(dt), inv.astype(dt), gamma.astype(dt), beta.astype(dt), relu, xhat, y)
    else:
        xhat = (x - mean.astype(dt)[None, :, None, None]) * inv.astype(dt)[None, :, None, None]
        y = xhat * gamma.astype(dt)[None, :, None, None] + beta.astype(dt)[None, :, None, None]
        if relu:
            np.maximum(y, 0, out=y)
    return (y, xhat) if keep_xhat else y


def bn_train_backward(dy, xhat, y, gamma, inv, relu):
    """Gradients ``(dx, dgamma, dbeta)``; ``y`` is the forward output (for the ReLU mask)."""
    dt = dy.dtype
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dy = np.ascontiguousarray(dy)
    if _accel.USE_NUMBA:
        dgamma, dbeta = _bn_grad_sums_nb(dy, xhat, y, relu)
        scale = (gamma * inv / n).astype(dt)
        dx = np.empty_like(dy)
        _bn_dx_nb(dy, xhat, y, relu, scale, dgamma.astype(dt), dbeta.astype(dt), dt.type(n), dx)
    else:
        if relu:
            dy = dy * (y > 0)
        dbeta = dy.sum(axis=(0, 2, 3), dtype=np.float64)
        dgamma = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        scale = (gamma * inv / n).astype(dt)
        dx = scale[None, :, None, None] * (
            n * dy - dbeta.astype(dt)[None, :, None, None] - xhat * dgamma.astype(dt)[None, :, None, None]
        )
    return dx, dgamma.astype(dt), dbeta.astype(dt)
