"""Compiled depthwise-convolution loops.

Depthwise convolution has too little arithmetic per element for BLAS, and the
pure-numpy shifted-slice loop spends most of its time on temporaries. These
numba kernels do the same sums in place. ``HAVE_NUMBA`` is False when numba is
unavailable; callers then fall back to numpy.
"""
import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def dw_forward(xp, w, out, sh, sw):
        """out[b,c,i,j] = sum_uv xp[b,c,i*sh+u,j*sw+v] * w[c,u,v]; ``out`` is overwritten."""
        n, c, oh, ow = out.shape
        kh, kw = w.shape[1], w.shape[2]
        for b in range(n):
            for ch in range(c):
                o = out[b, ch]
                x = xp[b, ch]
                o[:, :] = 0
                for u in range(kh):
                    for v in range(kw):
                        wv = w[ch, u, v]
                        if sw == 1:
                            for i in range(oh):
                                r = i * sh + u
                                for j in range(ow):
                                    o[i, j] += x[r, j + v] * wv
                        else:
                            for i in range(oh):
                                r = i * sh + u
                                for j in range(ow):
                                    o[i, j] += x[r, j * sw + v] * wv

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def dw_backward(xp, w, dout, dxp, dw, sh, sw):
        """Accumulate input and weight gradients; ``dxp`` and ``dw`` must start zeroed."""
        n, c, oh, ow = dout.shape
        kh, kw = w.shape[1], w.shape[2]
        for b in range(n):
            for ch in range(c):
                d = dout[b, ch]
                x = xp[b, ch]
                dx = dxp[b, ch]
                for u in range(kh):
                    for v in range(kw):
                        wv = w[ch, u, v]
                        acc = np.float32(0.0)
                        if sw == 1:
                            for i in range(oh):
                                r = i * sh + u
                                for j in range(ow):
                                    g = d[i, j]
                                    acc += g * x[r, j + v]
                                    dx[r, j + v] += g * wv
                        else:
                            for i in range(oh):
                                r = i * sh + u
                                for j in range(ow):
                                    g = d[i, j]
                                    acc += g * x[r, j * sw + v]
                                    dx[r, j * sw + v] += g * wv
                        dw[ch, u, v] += acc

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def bn_train_forward(x, gamma, beta, eps, y, xhat, mean, var):
        """Batch-statistics normalisation per channel; fills y, xhat, mean, var (biased)."""
        n, c, h, w = x.shape
        m = n * h * w
        for ch in range(c):
            s = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        s += x[b, ch, i, j]
            mu = s / m
            ss = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        d = x[b, ch, i, j] - mu
                        ss += d * d
            v = ss / m
            mean[ch] = mu
            var[ch] = v
            inv = np.float32(1.0 / np.sqrt(np.float32(v) + eps))
            mu32 = np.float32(mu)
            g = gamma[ch]
            be = beta[ch]
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        t = (x[b, ch, i, j] - mu32) * inv
                        xhat[b, ch, i, j] = t
                        y[b, ch, i, j] = t * g + be

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def bn_train_backward(dout, xhat, gamma, inv_std, dx, dgamma, dbeta):
        n, c, h, w = dout.shape
        m = n * h * w
        for ch in range(c):
            sb = 0.0
            sg = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        d = dout[b, ch, i, j]
                        sb += d
                        sg += d * xhat[b, ch, i, j]
            dbeta[ch] = sb
            dgamma[ch] = sg
            scale = np.float32(gamma[ch] * inv_std[ch] / m)
            sb32 = np.float32(sb)
            sg32 = np.float32(sg)
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        dx[b, ch, i, j] = scale * (m * dout[b, ch, i, j] - sb32 - xhat[b, ch, i, j] * sg32)
