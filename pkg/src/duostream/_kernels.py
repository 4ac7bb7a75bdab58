"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is picked once at import time: numba when it is importable and
``DUOSTREAM_NUMBA`` is not set to ``0``.  ``set_backend`` switches at runtime
(the benchmark and the equivalence tests use it).
"""
import os

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_BACKEND = "numba" if HAS_NUMBA and os.environ.get("DUOSTREAM_NUMBA", "1") != "0" else "numpy"


def backend():
    return _BACKEND


def set_backend(name):
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------

def _im2col_np(x):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 9, N, H, W), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = xp[:, :, di:di + H, dj:dj + W].transpose(1, 0, 2, 3)
    return cols.reshape(C * 9, N * H * W)


def _col2im_np(cols, N, C, H, W):
    d = cols.reshape(C, 9, N, H, W)
    dpad = np.zeros((C, N, H + 2, W + 2), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            dpad[:, :, di:di + H, dj:dj + W] += d[:, di * 3 + dj]
    return dpad[:, :, 1:H + 1, 1:W + 1].transpose(1, 0, 2, 3).copy()


def _maxpool_fwd_np(x):
    N, C, H, W = x.shape
    win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, H // 2, W // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie-breaking
    idx = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def _maxpool_bwd_np(dout, idx):
    N, C, Ho, Wo = dout.shape
    d4 = np.zeros((N, C, Ho, Wo, 4), dtype=dout.dtype)
    np.put_along_axis(d4, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    return d4.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * Ho, 2 * Wo)


def _bilinear_taps(py, px, H, W):
    y0 = np.floor(py)
    x0 = np.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    taps = []
    for dy, wy in ((0, 1.0 - wy1), (1, wy1)):
        for dx, wx in ((0, 1.0 - wx1), (1, wx1)):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            w = np.where(valid, wy * wx, 0.0)
            taps.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), w))
    return taps


def _bilinear_gather_np(img, py, px):
    N, C, H, W = img.shape
    out = np.zeros((N, py.shape[1], C), dtype=np.float64)
    n = np.arange(N)[:, None]
    for yi, xi, w in _bilinear_taps(py, px, H, W):
        out += img[n, :, yi, xi] * w[..., None]
    return out.transpose(0, 2, 1).astype(img.dtype)


def _bilinear_scatter_np(dout, py, px, H, W):
    N, C, P = dout.shape
    flat_n = (np.arange(N) * (H * W))[:, None]
    dimg = np.zeros((N, C, H * W), dtype=np.float64)
    for yi, xi, w in _bilinear_taps(py, px, H, W):
        idx = (flat_n + yi * W + xi).ravel()
        for c in range(C):
            vals = (dout[:, c, :] * w).ravel()
            dimg[:, c, :] += np.bincount(idx, weights=vals, minlength=N * H * W).reshape(N, H * W)
    return dimg.reshape(N, C, H, W).astype(dout.dtype)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    @numba.njit(cache=True)
    def _im2col_nb(x):
        N, C, H, W = x.shape
        HW = H * W
        xf = x.reshape(N * C * HW)
        cols = np.zeros((C * 9, N * HW), dtype=x.dtype)
        cf = cols.reshape(C * 9 * N * HW)
        for c in range(C):
            for di in range(3):
                for dj in range(3):
                    r0 = (c * 9 + di * 3 + dj) * N * HW
                    j0 = max(0, 1 - dj)
                    j1 = min(W, W + 1 - dj)
                    for n in range(N):
                        s0 = (n * C + c) * HW + (dj - 1)
                        for i in range(max(0, 1 - di), min(H, H + 1 - di)):
                            dst = r0 + n * HW + i * W
                            src = s0 + (i + di - 1) * W
                            for j in range(j0, j1):
                                cf[dst + j] = xf[src + j]
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(cols, N, C, H, W):
        HW = H * W
        dx = np.zeros((N, C, H, W), dtype=cols.dtype)
        for n in range(N):
            for c in range(C):
                for di in range(3):
                    for dj in range(3):
                        row = cols[c * 9 + di * 3 + dj]
                        j0 = max(0, 1 - dj)
                        j1 = min(W, W + 1 - dj)
                        for i in range(max(0, 1 - di), min(H, H + 1 - di)):
                            base = n * HW + i * W
                            dst = dx[n, c, i + di - 1]
                            for j in range(j0, j1):
                                dst[j + dj - 1] += row[base + j]
        return dx

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x):
        N, C, H, W = x.shape
        Ho, Wo = H // 2, W // 2
        out = np.empty((N, C, Ho, Wo), dtype=x.dtype)
        idx = np.empty((N, C, Ho, Wo), dtype=np.int8)
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[n, c, 2 * i, 2 * j]
                        k = 0
                        for q in range(1, 4):
                            v = x[n, c, 2 * i + q // 2, 2 * j + q % 2]
                            if v > best:
                                best = v
                                k = q
                        out[n, c, i, j] = best
                        idx[n, c, i, j] = k
        return out, idx

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(dout, idx):
        N, C, Ho, Wo = dout.shape
        dx = np.zeros((N, C, 2 * Ho, 2 * Wo), dtype=dout.dtype)
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        k = idx[n, c, i, j]
                        dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dout[n, c, i, j]
        return dx

    @numba.njit(cache=True)
    def _bilinear_gather_nb(img, py, px):
        N, C, H, W = img.shape
        P = py.shape[1]
        out = np.zeros((N, C, P), dtype=img.dtype)
        for n in range(N):
            for p in range(P):
                fy = np.floor(py[n, p])
                fx = np.floor(px[n, p])
                wy1 = py[n, p] - fy
                wx1 = px[n, p] - fx
                y0 = int(fy)
                x0 = int(fx)
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    wy = wy1 if dy == 1 else 1.0 - wy1
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        w = wy * (wx1 if dx == 1 else 1.0 - wx1)
                        for c in range(C):
                            out[n, c, p] += w * img[n, c, yi, xi]
        return out

    @numba.njit(cache=True)
    def _bilinear_scatter_nb(dout, py, px, H, W):
        N, C, P = dout.shape
        dimg = np.zeros((N, C, H, W), dtype=dout.dtype)
        for n in range(N):
            for p in range(P):
                fy = np.floor(py[n, p])
                fx = np.floor(px[n, p])
                wy1 = py[n, p] - fy
                wx1 = px[n, p] - fx
                y0 = int(fy)
                x0 = int(fx)
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    wy = wy1 if dy == 1 else 1.0 - wy1
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        w = wy * (wx1 if dx == 1 else 1.0 - wx1)
                        for c in range(C):
                            dimg[n, c, yi, xi] += w * dout[n, c, p]
        return dimg


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def im2col3x3(x):
    """(N,C,H,W) -> (C*9, N*H*W) patch matrix for a 3x3 kernel with unit zero padding.

    Row ``c*9 + 3*di + dj`` holds input channel c shifted by (di-1, dj-1), so a
    (F, C, 3, 3) kernel reshaped to (F, C*9) multiplies it directly.
    """
    if _BACKEND == "numba":
        return _im2col_nb(np.ascontiguousarray(x))
    return _im2col_np(x)


def col2im3x3(cols, N, C, H, W):
    if _BACKEND == "numba":
        return _col2im_nb(np.ascontiguousarray(cols), N, C, H, W)
    return _col2im_np(cols, N, C, H, W)


def maxpool2x2_forward(x):
    if _BACKEND == "numba":
        return _maxpool_fwd_nb(np.ascontiguousarray(x))
    return _maxpool_fwd_np(x)


def maxpool2x2_backward(dout, idx):
    if _BACKEND == "numba":
        return _maxpool_bwd_nb(np.ascontiguousarray(dout), idx)
    return _maxpool_bwd_np(dout, idx)


def bilinear_gather(img, py, px):
    """Sample ``img`` (N,C,H,W) at index coordinates (py, px), each (N,P).

    Pixel centres sit on integer coordinates; taps outside the image read 0.
    """
    py = np.ascontiguousarray(py, dtype=np.float64)
    px = np.ascontiguousarray(px, dtype=np.float64)
    if _BACKEND == "numba":
        return _bilinear_gather_nb(np.ascontiguousarray(img), py, px)
    return _bilinear_gather_np(img, py, px)


def bilinear_scatter(dout, py, px, H, W):
    """Adjoint of :func:`bilinear_gather` with respect to the image."""
    py = np.ascontiguousarray(py, dtype=np.float64)
    px = np.ascontiguousarray(px, dtype=np.float64)
    if _BACKEND == "numba":
        return _bilinear_scatter_nb(np.ascontiguousarray(dout), py, px, H, W)
    return _bilinear_scatter_np(dout, py, px, H, W)
