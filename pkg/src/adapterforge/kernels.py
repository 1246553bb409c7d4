"""Hot inner-loop kernels with two interchangeable backends.

The packing/scatter loops behind convolution, the 2x2 max-pool, and the
edge-detector's non-maximum suppression + hysteresis are the only places
where tight Python loops would dominate runtime.  Each has a numba ``@njit``
implementation and a pure-numpy fallback.  Select with::

    ADAPTERFORGE_BACKEND=numba   # default when numba imports
    ADAPTERFORGE_BACKEND=numpy   # vectorized fallback, no JIT

Matrix products themselves always go through numpy's BLAS; both backends
build identical im2col layouts, so results agree bit-for-bit.

``ADAPTERFORGE_THREADS`` caps the numba worker pool (the kernels below are
sequential, so this only matters if parallel kernels are added).

``benchmarks/bench_kernels.py`` times the two backends side by side.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _np_im2col(xp, k, stride):
    """(n,c,hp,wp) padded input -> (n*ho*wo, c*k*k) patch matrix."""
    n, c, hp, wp = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols)


def _np_col2im(dcols, n, c, hp, wp, k, stride):
    """Scatter-add patch gradients back onto the padded input."""
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + (ho - 1) * stride + 1:stride,
                v:v + (wo - 1) * stride + 1:stride] += d[:, :, :, :, u, v]
    return dxp


def _np_maxpool2x2(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1).astype(np.uint8)  # first max wins ties
    y = np.take_along_axis(flat, idx[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def _np_maxpool2x2_grad(g, idx):
    n, c, ho, wo = g.shape
    flat = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(flat, idx[..., None].astype(np.int64), g[..., None], axis=-1)
    win = flat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, ho * 2, wo * 2))


def _np_nms(mag, dirbin):
    """Thin ridges: keep a pixel iff >= both neighbours along its gradient."""
    h, w = mag.shape
    p = np.zeros((h + 2, w + 2), dtype=mag.dtype)
    p[1:-1, 1:-1] = mag
    c = p[1:-1, 1:-1]
    nbr = {
        0: (p[1:-1, 2:], p[1:-1, :-2]),    # gradient E-W
        1: (p[:-2, 2:], p[2:, :-2]),       # 45 deg
        2: (p[:-2, 1:-1], p[2:, 1:-1]),    # N-S
        3: (p[:-2, :-2], p[2:, 2:]),       # 135 deg
    }
    out = np.zeros_like(mag)
    for b, (a1, a2) in nbr.items():
        m = (dirbin == b) & (c >= a1) & (c >= a2)
        out[m] = mag[m]
    return out


def _np_hysteresis(strong, weak):
    """Keep weak-edge components (8-connected) that touch a strong pixel."""
    from scipy import ndimage

    mask = strong | weak
    labels, nlab = ndimage.label(mask, structure=np.ones((3, 3), dtype=np.int8))
    if nlab == 0:
        return np.zeros_like(strong)
    keep = np.zeros(nlab + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


# --------------------------------------------------------------------------
# numba implementations (compiled lazily on first call, cached on disk)
# --------------------------------------------------------------------------

_env = os.environ.get("ADAPTERFORGE_BACKEND", "").strip().lower()
if _env not in ("", "auto", "numba", "numpy"):
    raise ConfigError(f"ADAPTERFORGE_BACKEND must be 'numba' or 'numpy', got {_env!r}")

_HAVE_NUMBA = False
if _env != "numpy":
    try:
        import numba
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        if _env == "numba":
            raise ConfigError("ADAPTERFORGE_BACKEND=numba but numba is not installed")

BACKEND = "numba" if _HAVE_NUMBA else "numpy"

if _HAVE_NUMBA:
    _threads = os.environ.get("ADAPTERFORGE_THREADS", "").strip()
    if _threads:
        try:
            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            raise ConfigError(f"ADAPTERFORGE_THREADS must be an integer, got {_threads!r}")

    @njit(cache=True)
    def _nb_im2col(xp, k, stride):
        n, c, hp, wp = xp.shape
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
        cols = np.empty((n * ho * wo, c * k * k), dtype=np.float32)
        for b in range(n):
            for i in range(ho):
                i0 = i * stride
                for j in range(wo):
                    r = (b * ho + i) * wo + j
                    j0 = j * stride
                    t = 0
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                cols[r, t] = xp[b, ci, i0 + u, j0 + v]
                                t += 1
        return cols

    @njit(cache=True)
    def _nb_col2im(dcols, n, c, hp, wp, k, stride):
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
        dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
        for b in range(n):
            for i in range(ho):
                i0 = i * stride
                for j in range(wo):
                    r = (b * ho + i) * wo + j
                    j0 = j * stride
                    t = 0
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                dxp[b, ci, i0 + u, j0 + v] += dcols[r, t]
                                t += 1
        return dxp

    @njit(cache=True)
    def _nb_maxpool2x2(x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        y = np.empty((n, c, ho, wo), dtype=x.dtype)
        idx = np.empty((n, c, ho, wo), dtype=np.uint8)
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ci, 2 * i, 2 * j]
                        arg = np.uint8(0)
                        # window order (0,0) (0,1) (1,0) (1,1); first max wins
                        v = x[b, ci, 2 * i, 2 * j + 1]
                        if v > best:
                            best, arg = v, np.uint8(1)
                        v = x[b, ci, 2 * i + 1, 2 * j]
                        if v > best:
                            best, arg = v, np.uint8(2)
                        v = x[b, ci, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best, arg = v, np.uint8(3)
                        y[b, ci, i, j] = best
                        idx[b, ci, i, j] = arg
        return y, idx

    @njit(cache=True)
    def _nb_maxpool2x2_grad(g, idx):
        n, c, ho, wo = g.shape
        dx = np.zeros((n, c, ho * 2, wo * 2), dtype=g.dtype)
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        a = idx[b, ci, i, j]
                        dx[b, ci, 2 * i + a // 2, 2 * j + a % 2] = g[b, ci, i, j]
        return dx

    @njit(cache=True)
    def _nb_nms(mag, dirbin):
        h, w = mag.shape
        out = np.zeros_like(mag)
        for y in range(h):
            for x in range(w):
                b = dirbin[y, x]
                if b == 0:
                    n1 = mag[y, x + 1] if x + 1 < w else 0.0
                    n2 = mag[y, x - 1] if x - 1 >= 0 else 0.0
                elif b == 1:
                    n1 = mag[y - 1, x + 1] if (y - 1 >= 0 and x + 1 < w) else 0.0
                    n2 = mag[y + 1, x - 1] if (y + 1 < h and x - 1 >= 0) else 0.0
                elif b == 2:
                    n1 = mag[y - 1, x] if y - 1 >= 0 else 0.0
                    n2 = mag[y + 1, x] if y + 1 < h else 0.0
                else:
                    n1 = mag[y - 1, x - 1] if (y - 1 >= 0 and x - 1 >= 0) else 0.0
                    n2 = mag[y + 1, x + 1] if (y + 1 < h and x + 1 < w) else 0.0
                m = mag[y, x]
                if m >= n1 and m >= n2:
                    out[y, x] = m
        return out

    @njit(cache=True)
    def _nb_hysteresis(strong, weak):
        h, w = strong.shape
        out = strong.copy()
        stack = np.empty((h * w, 2), dtype=np.int64)
        top = 0
        for y in range(h):
            for x in range(w):
                if strong[y, x]:
                    stack[top, 0] = y
                    stack[top, 1] = x
                    top += 1
        while top > 0:
            top -= 1
            y, x = stack[top, 0], stack[top, 1]
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not out[ny, nx]:
                        out[ny, nx] = True
                        stack[top, 0] = ny
                        stack[top, 1] = nx
                        top += 1
        return out


if BACKEND == "numba":
    im2col = _nb_im2col
    col2im = _nb_col2im
    maxpool2x2 = _nb_maxpool2x2
    maxpool2x2_grad = _nb_maxpool2x2_grad
    nms = _nb_nms
    hysteresis = _nb_hysteresis
else:
    im2col = _np_im2col
    col2im = _np_col2im
    maxpool2x2 = _np_maxpool2x2
    maxpool2x2_grad = _np_maxpool2x2_grad
    nms = _np_nms
    hysteresis = _np_hysteresis
