"""Hot inner loops: patch extraction for convolution/pooling and greedy herding.

Every kernel exists twice, a numba ``@njit`` version and a pure-numpy version
with identical semantics.  The public names bind to the numba path unless
``CLBENCH_NUMBA=0`` is set (or numba is missing).  ``benchmarks/bench_kernels.py``
times both.
"""
import numpy as np

from ._config import USE_NUMBA

__all__ = ["im2col", "col2im", "herding_order", "conv_out_size", "USE_NUMBA"]


TIE_TOL = 1e-12


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_np(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw); row order n, oh, ow; column order c, i, j."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im_np(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col_np`: scatter-add patch columns back to an image."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def herding_order_np(features, m):
    """Greedy mean matching; returns ``m`` distinct row indices in selection order.

    Step k picks the unselected row i minimising ||mu - (S + f_i) / k|| where S is
    the running sum of already-selected rows.  Ties (distances within a relative
    TIE_TOL of the minimum, so rounding noise cannot break them) go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    mu = features.mean(axis=0)
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    order = np.empty(m, dtype=np.int64)
    for k in range(1, m + 1):
        cand = (running[None, :] + features) / k
        dist = np.sqrt(((mu[None, :] - cand) ** 2).sum(axis=1))
        dist[taken] = np.inf
        best = dist.min()
        i = int(np.flatnonzero(dist <= best + TIE_TOL * max(best, 1.0))[0])
        order[k - 1] = i
        taken[i] = True
        running += features[i]
    return order


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        cols = np.zeros((n * oh * ow, c * kh * kw), dtype=x.dtype)
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    row = (b * oh + y) * ow + z
                    for ch in range(c):
                        for i in range(kh):
                            hi = y * stride + i - pad
                            if hi < 0 or hi >= h:
                                continue
                            for j in range(kw):
                                wj = z * stride + j - pad
                                if wj < 0 or wj >= w:
                                    continue
                                cols[row, (ch * kh + i) * kw + j] = x[b, ch, hi, wj]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad):
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    row = (b * oh + y) * ow + z
                    for ch in range(c):
                        for i in range(kh):
                            hi = y * stride + i - pad
                            if hi < 0 or hi >= h:
                                continue
                            for j in range(kw):
                                wj = z * stride + j - pad
                                if wj < 0 or wj >= w:
                                    continue
                                out[b, ch, hi, wj] += cols[row, (ch * kh + i) * kw + j]
        return out

    @njit(cache=True)
    def _herding_nb(features, m, tol):
        n, d = features.shape
        mu = np.zeros(d)
        for i in range(n):
            for t in range(d):
                mu[t] += features[i, t]
        for t in range(d):
            mu[t] /= n
        running = np.zeros(d)
        taken = np.zeros(n, dtype=np.bool_)
        order = np.empty(m, dtype=np.int64)
        dist = np.empty(n)
        for k in range(1, m + 1):
            best_d = np.inf
            for i in range(n):
                if taken[i]:
                    dist[i] = np.inf
                    continue
                acc = 0.0
                for t in range(d):
                    diff = mu[t] - (running[t] + features[i, t]) / k
                    acc += diff * diff
                dist[i] = np.sqrt(acc)
                if dist[i] < best_d:
                    best_d = dist[i]
            cut = best_d + tol * max(best_d, 1.0)
            best = -1
            for i in range(n):
                if dist[i] <= cut:
                    best = i
                    break
            order[k - 1] = best
            taken[best] = True
            for t in range(d):
                running[t] += features[best, t]
        return order

    def im2col_nb(x, kh, kw, stride, pad):
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad)

    def col2im_nb(cols, x_shape, kh, kw, stride, pad):
        n, c, h, w = x_shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)

    def herding_order_nb(features, m):
        return _herding_nb(np.ascontiguousarray(features, dtype=np.float64), int(m), TIE_TOL)

    im2col, col2im, herding_order = im2col_nb, col2im_nb, herding_order_nb
else:
    im2col_nb = col2im_nb = herding_order_nb = None
    im2col, col2im, herding_order = im2col_np, col2im_np, herding_order_np
