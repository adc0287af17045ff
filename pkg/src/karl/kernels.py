"""Hot numeric kernels with numba-jitted and pure-numpy twins.

Every kernel exists in two semantically identical versions:

* ``<name>_numpy`` -- vectorized numpy, always available.
* ``<name>_numba`` -- ``@njit(cache=True)`` loop version.

The public name (``nearest_codes``, ``softmax_rows``, ``ssim_window_stats``,
``mandelbrot_escape``) binds to one of the two at import time:

* ``KARL_NUMBA=0`` or ``KARL_DETERMINISTIC=1`` forces the numpy path;
* ``KARL_NUMBA=1`` (default when numba imports) selects the jitted path.

All kernels are deterministic on a fixed machine in either mode: no
parallel reductions, no fastmath. ``benchmarks/bench_kernels.py`` compares
the two paths.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _env_flag(name, default):
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "")


USE_NUMBA = HAS_NUMBA and _env_flag("KARL_NUMBA", True) and not _env_flag(
    "KARL_DETERMINISTIC", False
)


# ---------------------------------------------------------------------------
# Nearest-code scan (vector quantizer inner loop)
# ---------------------------------------------------------------------------

def nearest_codes_numpy(z, codes):
    """For each row of z (N, d) return (index, squared distance) of the
    nearest row of codes (K, d)."""
    z = np.ascontiguousarray(z)
    codes = np.ascontiguousarray(codes)
    # ||z - c||^2 = ||z||^2 - 2 z.c + ||c||^2, computed without an (N,K,d) temp
    cross = z @ codes.T
    d2 = (z * z).sum(axis=1)[:, None] - 2.0 * cross + (codes * codes).sum(axis=1)[None, :]
    idx = np.argmin(d2, axis=1)
    dist = np.maximum(d2[np.arange(z.shape[0]), idx], 0.0)
    return idx.astype(np.int64), dist


@njit(cache=True)
def _nearest_codes_jit(z, codes):
    n, d = z.shape
    k = codes.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=z.dtype)
    for i in range(n):
        best = np.inf
        best_j = 0
        for j in range(k):
            acc = 0.0
            for t in range(d):
                diff = z[i, t] - codes[j, t]
                acc += diff * diff
            if acc < best:
                best = acc
                best_j = j
        idx[i] = best_j
        dist[i] = best
    return idx, dist


def nearest_codes_numba(z, codes):
    z = np.ascontiguousarray(z)
    codes = np.ascontiguousarray(codes).astype(z.dtype)
    return _nearest_codes_jit(z, codes)


# ---------------------------------------------------------------------------
# Row softmax (attention inner loop)
# ---------------------------------------------------------------------------

def softmax_rows_numpy(x):
    """Softmax over the last axis of an arbitrary-rank array."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


@njit(cache=True)
def _softmax_rows_jit(x2):
    n, d = x2.shape
    out = np.empty_like(x2)
    for i in range(n):
        m = x2[i, 0]
        for j in range(1, d):
            if x2[i, j] > m:
                m = x2[i, j]
        s = 0.0
        for j in range(d):
            v = np.exp(x2[i, j] - m)
            out[i, j] = v
            s += v
        inv = 1.0 / s
        for j in range(d):
            out[i, j] *= inv
    return out


def softmax_rows_numba(x):
    x = np.ascontiguousarray(x)
    flat = x.reshape(-1, x.shape[-1])
    return _softmax_rows_jit(flat).reshape(x.shape)


# ---------------------------------------------------------------------------
# SSIM sliding-window statistics
# ---------------------------------------------------------------------------

def ssim_window_stats_numpy(a, b, win):
    """Per-window (mean_a, mean_b, var_a, var_b, cov) over all valid win x win
    windows of two single-channel images. Population (ddof=0) moments."""
    va = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    vb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu_a = va.mean(axis=(-1, -2))
    mu_b = vb.mean(axis=(-1, -2))
    var_a = (va * va).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (vb * vb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (va * vb).mean(axis=(-1, -2)) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


@njit(cache=True)
def _ssim_window_stats_jit(a, b, win):
    h, w = a.shape
    oh = h - win + 1
    ow = w - win + 1
    mu_a = np.empty((oh, ow), dtype=a.dtype)
    mu_b = np.empty((oh, ow), dtype=a.dtype)
    var_a = np.empty((oh, ow), dtype=a.dtype)
    var_b = np.empty((oh, ow), dtype=a.dtype)
    cov = np.empty((oh, ow), dtype=a.dtype)
    inv_n = 1.0 / (win * win)
    for i in range(oh):
        for j in range(ow):
            sa = 0.0
            sb = 0.0
            saa = 0.0
            sbb = 0.0
            sab = 0.0
            for di in range(win):
                for dj in range(win):
                    x = a[i + di, j + dj]
                    y = b[i + di, j + dj]
                    sa += x
                    sb += y
                    saa += x * x
                    sbb += y * y
                    sab += x * y
            ma = sa * inv_n
            mb = sb * inv_n
            mu_a[i, j] = ma
            mu_b[i, j] = mb
            var_a[i, j] = saa * inv_n - ma * ma
            var_b[i, j] = sbb * inv_n - mb * mb
            cov[i, j] = sab * inv_n - ma * mb
    return mu_a, mu_b, var_a, var_b, cov


def ssim_window_stats_numba(a, b, win):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _ssim_window_stats_jit(a, b, win)


# ---------------------------------------------------------------------------
# Mandelbrot escape-time render
# ---------------------------------------------------------------------------

def _mandel_axes(re0, re1, im0, im1, height, width):
    # shared by both paths so the sample grid is bit-identical
    if width > 1:
        re = re0 + (re1 - re0) * np.arange(width, dtype=np.float64) / (width - 1)
    else:
        re = np.array([re0], dtype=np.float64)
    if height > 1:
        im = im0 + (im1 - im0) * np.arange(height, dtype=np.float64) / (height - 1)
    else:
        im = np.array([im0], dtype=np.float64)
    return re, im


def mandelbrot_escape_numpy(re0, re1, im0, im1, height, width, max_iter):
    """Normalized escape-iteration field in [0, 1] over the given viewport.

    A cell's value is (updates applied before |z| > 2 is observed) / max_iter;
    interior points saturate at 1.
    """
    re, im = _mandel_axes(re0, re1, im0, im1, height, width)
    cr = np.broadcast_to(re[None, :], (height, width))
    ci = np.broadcast_to(im[:, None], (height, width))
    zr = np.zeros((height, width), dtype=np.float64)
    zi = np.zeros((height, width), dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.int64)
    alive = np.ones((height, width), dtype=bool)
    for _ in range(max_iter):
        if not alive.any():
            break
        zr2 = zr * zr
        zi2 = zi * zi
        # mirror the scalar loop exactly: zi before zr, same op order
        nzi = 2.0 * zr * zi + ci
        nzr = zr2 - zi2 + cr
        zr = np.where(alive, nzr, zr)
        zi = np.where(alive, nzi, zi)
        counts[alive] += 1
        alive &= zr * zr + zi * zi <= 4.0
    return counts.astype(np.float64) / max_iter


@njit(cache=True)
def _mandelbrot_escape_jit(re, im, max_iter):
    height = im.shape[0]
    width = re.shape[0]
    out = np.empty((height, width), dtype=np.float64)
    for i in range(height):
        ci = im[i]
        for j in range(width):
            cr = re[j]
            zr = 0.0
            zi = 0.0
            n = 0
            for _ in range(max_iter):
                zr2 = zr * zr
                zi2 = zi * zi
                nzi = 2.0 * zr * zi + ci
                nzr = zr2 - zi2 + cr
                zr = nzr
                zi = nzi
                n += 1
                if zr * zr + zi * zi > 4.0:
                    break
            out[i, j] = n / max_iter
    return out


def mandelbrot_escape_numba(re0, re1, im0, im1, height, width, max_iter):
    re, im = _mandel_axes(re0, re1, im0, im1, height, width)
    return _mandelbrot_escape_jit(re, im, int(max_iter))


if USE_NUMBA:
    nearest_codes = nearest_codes_numba
    softmax_rows = softmax_rows_numba
    ssim_window_stats = ssim_window_stats_numba
    mandelbrot_escape = mandelbrot_escape_numba
else:
    nearest_codes = nearest_codes_numpy
    softmax_rows = softmax_rows_numpy
    ssim_window_stats = ssim_window_stats_numpy
    mandelbrot_escape = mandelbrot_escape_numpy
