"""Differentiable tensor primitives with explicit vector-Jacobian backward passes.

Every forward op returns ``(output, cache)``; the matching ``*_backward`` takes
that cache plus the upstream gradient. Tensors are plain float64 numpy arrays
laid out as (batch, channels, height, width).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

NEG_FILL = np.finfo(np.float64).min
SPP_GRID = 16

_tags = itertools.count(1)


class ShapeError(ValueError):
    pass


class CacheMismatchError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass
class OpCache:
    """Forward record consumed by exactly one kind of backward."""

    op: str
    out_shape: tuple
    data: dict = field(default_factory=dict)
    tag: int = field(default_factory=lambda: next(_tags))

    def expect(self, op: str, grad_out: np.ndarray) -> None:
        if self.op != op:
            raise CacheMismatchError(
                f"cache tag mismatch: {op}_backward got a cache from {self.op} (tag {self.tag})"
            )
        if tuple(grad_out.shape) != tuple(self.out_shape):
            raise CacheMismatchError(
                f"{op}_backward: grad shape {tuple(grad_out.shape)} does not match "
                f"forward output {tuple(self.out_shape)} (tag {self.tag})"
            )


def _as4(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, d: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * d:i * d + h, j * d:j * d + w]
    return cols.reshape(n, c * kh * kw, h * w)


def conv2d(x, weights, bias, dilation: int = 1):
    """Stride-1 2-d convolution with "same" zero padding and the given dilation."""
    x = _as4(x)
    weights = _as4(weights, "weights")
    bias = np.asarray(bias, dtype=np.float64)
    oc, ic, kh, kw = weights.shape
    if x.shape[1] != ic:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {x.shape[1]} channels but weights "
            f"shape {weights.shape} expect {ic}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got weights shape {weights.shape}")
    if bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weights shape {weights.shape}")
    if int(dilation) < 1:
        raise ShapeError(f"conv2d: dilation must be positive, got {dilation}")
    d = int(dilation)
    n, _, h, w = x.shape
    ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, d, h, w)
    wmat = weights.reshape(oc, -1)
    out = np.matmul(wmat, cols) + bias[None, :, None]
    out = out.reshape(n, oc, h, w)
    cache = OpCache("conv2d", out.shape, {
        "cols": cols, "weights": weights, "dilation": d, "in_shape": x.shape,
    })
    return out, cache


def conv2d_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("conv2d", grad_out)
    cols = cache.data["cols"]
    weights = cache.data["weights"]
    d = cache.data["dilation"]
    n, c, h, w = cache.data["in_shape"]
    oc, _, kh, kw = weights.shape
    g = grad_out.reshape(n, oc, h * w)

    grad_w = np.zeros(oc * c * kh * kw)
    for b in range(n):
        grad_w += (g[b] @ cols[b].T).ravel()
    grad_w = grad_w.reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))

    gcols = np.matmul(weights.reshape(oc, -1).T, g).reshape(n, c, kh, kw, h, w)
    ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i * d:i * d + h, j * d:j * d + w] += gcols[:, :, i, j]
    grad_x = gxp[:, :, ph:ph + h, pw:pw + w].copy()
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2d(x):
    """2x2 max pooling, stride 2. Odd sides are padded right/bottom with the
    most negative finite float so every real pixel lands in some window."""
    x = _as4(x)
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError(f"maxpool2d: zero-sized spatial dims in shape {x.shape}")
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = x
    if h % 2 or w % 2:
        xp = np.full((n, c, 2 * ho, 2 * wo), NEG_FILL)
        xp[:, :, :h, :w] = x
    # window entries in row-major scan order: (0,0), (0,1), (1,0), (1,1)
    win = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, OpCache("maxpool2d", out.shape, {"arg": arg, "in_shape": x.shape})


def maxpool2d_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("maxpool2d", grad_out)
    arg = cache.data["arg"]
    n, c, h, w = cache.data["in_shape"]
    ho, wo = arg.shape[2:]
    win = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(win, arg[..., None], grad_out[..., None], axis=-1)
    gx = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return gx[:, :, :h, :w].copy()


def channel_pool(x):
    """Per-pixel max and mean across channels, stacked as two channels."""
    x = _as4(x)
    if x.shape[1] < 1:
        raise ShapeError(f"channel_pool: need at least one channel, got shape {x.shape}")
    arg = x.argmax(axis=1)
    mx = np.take_along_axis(x, arg[:, None], axis=1)
    mean = x.mean(axis=1, keepdims=True)
    out = np.concatenate([mx, mean], axis=1)
    return out, OpCache("channel_pool", out.shape, {"arg": arg, "in_shape": x.shape})


def channel_pool_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("channel_pool", grad_out)
    n, c, h, w = cache.data["in_shape"]
    gx = np.repeat(grad_out[:, 1:2] / c, c, axis=1)
    gmax = np.zeros((n, c, h, w))
    np.put_along_axis(gmax, cache.data["arg"][:, None], grad_out[:, 0:1], axis=1)
    return gx + gmax


def _spp_edges(length: int, grid: int) -> list[tuple[int, int]]:
    return [((b * length) // grid, -((-(b + 1) * length) // grid)) for b in range(grid)]


def spp_pool(x, grid: int = SPP_GRID):
    """Adaptive max pooling onto a fixed grid x grid layout, flattened per item.

    Output shape is (N, C * grid * grid) whatever the input's spatial size.
    """
    x = _as4(x)
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"spp_pool: empty spatial dims in shape {x.shape}")
    rows, cols = _spp_edges(h, grid), _spp_edges(w, grid)
    out = np.empty((n, c, grid, grid))
    # flat index of each bin's argmax inside the h*w plane
    where = np.empty((n, c, grid, grid), dtype=np.int64)
    for bi, (r0, r1) in enumerate(rows):
        for bj, (c0, c1) in enumerate(cols):
            block = x[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            k = block.argmax(axis=-1)
            out[:, :, bi, bj] = np.take_along_axis(block, k[..., None], axis=-1)[..., 0]
            bw = c1 - c0
            where[:, :, bi, bj] = (r0 + k // bw) * w + (c0 + k % bw)
    flat = out.reshape(n, c * grid * grid)
    return flat, OpCache("spp_pool", flat.shape, {"where": where, "in_shape": x.shape})


def spp_pool_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("spp_pool", grad_out)
    n, c, h, w = cache.data["in_shape"]
    where = cache.data["where"].reshape(n, c, -1)
    g = np.zeros((n, c, h * w))
    grad = grad_out.reshape(n, c, -1)
    for b in range(n):
        for ch in range(c):
            np.add.at(g[b, ch], where[b, ch], grad[b, ch])
    return g.reshape(n, c, h, w)


# --------------------------------------------------------------------------
# resampling and pointwise
# --------------------------------------------------------------------------

def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix, half-pixel centres (align_corners=False)."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(pos)), src - 1)
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def resize_bilinear(x, new_h: int, new_w: int):
    x = _as4(x)
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"resize_bilinear: target size must be positive, got {new_h}x{new_w}")
    ah = bilinear_matrix(x.shape[2], new_h)
    aw = bilinear_matrix(x.shape[3], new_w)
    out = ah @ x @ aw.T
    return out, OpCache("resize_bilinear", out.shape, {"ah": ah, "aw": aw})


def resize_bilinear_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("resize_bilinear", grad_out)
    return cache.data["ah"].T @ grad_out @ cache.data["aw"]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str):
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "sigmoid":
        out = sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out, OpCache("activation", out.shape, {"kind": kind, "out": out})


def activation_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("activation", grad_out)
    out = cache.data["out"]
    if cache.data["kind"] == "relu":
        return grad_out * (out > 0)
    return grad_out * out * (1.0 - out)


def dense(x, weights, bias):
    """Affine map ``weights @ x + bias``; ``x`` is a vector or a (batch, in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"dense: input shape {x.shape}, weights shape {weights.shape}, bias shape {bias.shape}"
        )
    out = x @ weights.T + bias
    return out, OpCache("dense", out.shape, {"x": x, "weights": weights})


def dense_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("dense", grad_out)
    x, wts = cache.data["x"], cache.data["weights"]
    grad_x = grad_out @ wts
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple | None
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    epsilon: float = 1e-5,
    coords=None,
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradient against central differences.

    ``fn(x)`` returns ``(value, grad)``; only the value is used at perturbed
    points. ``coords`` optionally restricts the check to a subset of flat
    indices (large tensors). Relative error is ``|a-n| / max(|a|, |n|, 1e-8)``.
    """
    x = np.array(point, dtype=np.float64)
    value, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} != point shape {x.shape}")
    if not np.isfinite(value):
        raise NumericalError(f"function value is not finite at the base point: {value}")
    flat = x.ravel()
    idx = range(flat.size) if coords is None else coords
    worst, worst_i, n = 0.0, None, 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = fn(x)[0]
        flat[i] = orig - epsilon
        fm = fn(x)[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"function value is not finite near flat index {i}")
        num = (fp - fm) / (2.0 * epsilon)
        a = analytic.flat[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        n += 1
        if err > worst or worst_i is None:
            worst, worst_i = max(err, worst), np.unravel_index(i, x.shape)
    return GradCheckReport(float(worst), worst_i, n)
