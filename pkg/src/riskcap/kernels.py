"""Row-wise numeric kernels with a numba path and a pure-numpy path.

The backend is picked once at import from ``RISKCAP_KERNELS`` (``numba`` or
``numpy``). When numba is missing the numpy path is used regardless.
``use_backend`` switches at runtime (tests and the benchmark use it).

All kernels take and return float64 arrays. Row kernels expect 2-D
C-contiguous input; callers reshape.
"""

import os
import warnings

import numpy as np

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba ships with the env
    numba = None
    NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_bwd_np(g, xhat, rstd, gain):
    gx = g * gain
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _box_iou_np(a, b):
    """IoU and GIoU for paired center-format boxes, arrays of shape (n, 4).

    Overlap and enclosing extents come from the center distance rather than
    corner differences, so nested and touching boxes are exact.
    """
    d = np.abs(a[:, :2] - b[:, :2])
    half = (a[:, 2:] + b[:, 2:]) / 2
    over = np.maximum(np.minimum(np.minimum(a[:, 2:], b[:, 2:]), half - d), 0.0)
    ext = np.maximum(np.maximum(a[:, 2:], b[:, 2:]), half + d)
    inter = over[:, 0] * over[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    iou = inter / union
    enc = ext[:, 0] * ext[:, 1]
    return iou, iou - np.maximum(enc - union, 0.0) / enc


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def _softmax_fwd_nb(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @numba.njit(cache=True)
    def _softmax_bwd_nb(y, g):
        n, m = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += g[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(cache=True)
    def _layer_norm_fwd_nb(x, gain, bias, eps):
        n, m = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = x[i, j] - mu
                var += d * d
            var /= m
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(m):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @numba.njit(cache=True)
    def _layer_norm_bwd_nb(g, xhat, rstd, gain):
        n, m = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(m)
        dbias = np.zeros(m)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(m):
                gx = g[i, j] * gain[j]
                s1 += gx
                s2 += gx * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            s1 /= m
            s2 /= m
            for j in range(m):
                dx[i, j] = (g[i, j] * gain[j] - s1 - xhat[i, j] * s2) * rstd[i]
        return dx, dgain, dbias

    @numba.njit(cache=True)
    def _box_iou_nb(a, b):
        n = a.shape[0]
        iou = np.empty(n)
        giou = np.empty(n)
        for i in range(n):
            inter = 1.0
            enc = 1.0
            for k in range(2):
                d = abs(a[i, k] - b[i, k])
                half = (a[i, k + 2] + b[i, k + 2]) / 2
                inter *= max(min(a[i, k + 2], b[i, k + 2], half - d), 0.0)
                enc *= max(a[i, k + 2], b[i, k + 2], half + d)
            union = a[i, 2] * a[i, 3] + b[i, 2] * b[i, 3] - inter
            iou[i] = inter / union
            giou[i] = iou[i] - max(enc - union, 0.0) / enc
        return iou, giou


_NUMPY = {
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "box_iou": _box_iou_np,
}

_NUMBA = (
    {
        "softmax_fwd": _softmax_fwd_nb,
        "softmax_bwd": _softmax_bwd_nb,
        "layer_norm_fwd": _layer_norm_fwd_nb,
        "layer_norm_bwd": _layer_norm_bwd_nb,
        "box_iou": _box_iou_nb,
    }
    if NUMBA_AVAILABLE
    else {}
)

_active = _NUMPY
BACKEND = "numpy"


def use_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the active name."""
    global _active, BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        warnings.warn("numba unavailable, staying on numpy kernels")
        name = "numpy"
    _active = _NUMBA if name == "numba" else _NUMPY
    BACKEND = name
    return name


use_backend(os.environ.get("RISKCAP_KERNELS", "numba" if NUMBA_AVAILABLE else "numpy"))


def softmax_fwd(x):
    return _active["softmax_fwd"](np.ascontiguousarray(x))


def softmax_bwd(y, g):
    return _active["softmax_bwd"](np.ascontiguousarray(y), np.ascontiguousarray(g))


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (y, xhat, rstd) for rows of ``x``."""
    return _active["layer_norm_fwd"](
        np.ascontiguousarray(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps)
    )


def layer_norm_bwd(g, xhat, rstd, gain):
    """Returns (dx, dgain, dbias)."""
    return _active["layer_norm_bwd"](
        np.ascontiguousarray(g), xhat, rstd, np.ascontiguousarray(gain)
    )


def box_iou(a, b):
    """Paired (iou, giou) for center-format boxes of shape (n, 4)."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return _active["box_iou"](a, b)
