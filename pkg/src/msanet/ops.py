"""Differentiable neural operators on NCHW tensors.

Convolutions are computed as a single GEMM over an unfolded column buffer of
layout ``(Cin, K, N, Ho, Wo)`` where ``K = kh * kw``. The modulated
deformable convolution fills the same buffer by bilinear sampling and then
reuses the exact GEMM path of :func:`conv2d`, so that zero offsets with a
unit mask reproduce the standard convolution bit for bit.

Deformable offsets use the layout ``[dx_1, dy_1, ..., dx_K, dy_K]`` along the
channel axis; ``dx`` is horizontal (width) and ``dy`` vertical (height). Taps
are enumerated row-major over the kernel window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, make_result

LEAKY_SLOPE = 0.2

# When a list, piecewise ops append the region each input falls in
# (activation sign, bilinear cell). Gradient checks compare these to skip
# perturbations that straddle a kink.
_kink_probe: list | None = None


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ShapeError("channel counts must be positive")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            _out_extent(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0]),
            _out_extent(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1]),
        )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


def _out_extent(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


# ---------------------------------------------------------------------------
# unfold / fold kernels (pure numpy)
# ---------------------------------------------------------------------------


def _unfold(xt: np.ndarray, kh, kw, stride, padding, dilation, ho, wo) -> np.ndarray:
    """(C, N, H, W) -> column buffer (C, kh*kw, N, ho, wo)."""
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    c, n, _, _ = xt.shape
    xp = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xt
    cols = np.empty((c, kh * kw, n, ho, wo), dtype=xt.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            cols[:, i * kw + j] = xp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw]
    return cols


def _fold(cols: np.ndarray, h, w, kh, kw, stride, padding, dilation) -> np.ndarray:
    """Adjoint of :func:`_unfold`: (C, K, N, ho, wo) -> (C, N, h, w)."""
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    c, _, n, ho, wo = cols.shape
    hp = max(h + 2 * ph, (kh - 1) * dh + sh * (ho - 1) + 1)
    wp = max(w + 2 * pw, (kw - 1) * dw + sw * (wo - 1) + 1)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            out[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw] += cols[:, i * kw + j]
    return out[:, :, ph:ph + h, pw:pw + w]


def _gemm(cols: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Column buffer times flattened weight -> (N, Cout, ho, wo)."""
    cout = weight.shape[0]
    _, _, n, ho, wo = cols.shape
    out = weight.reshape(cout, -1) @ cols.reshape(-1, n * ho * wo)
    out = out.reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.reshape(cout, 1, 1, 1)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _gemm_backward(g: np.ndarray, cols: np.ndarray, weight: np.ndarray):
    """Gradients of :func:`_gemm` w.r.t. the column buffer, weight and bias."""
    cout = weight.shape[0]
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
    flat = cols.reshape(-1, gt.shape[1])
    gw = (gt @ flat.T).reshape(weight.shape)
    gcols = (weight.reshape(cout, -1).T @ gt).reshape(cols.shape)
    gb = gt.sum(axis=1)
    return gcols, gw, gb


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None):
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"expected (Cout, Cin, kh, kw) weight, got {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1) -> Tensor:
    """Zero-padded 2-D cross-correlation."""
    _check_conv_args(x, weight, bias)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    ho = _out_extent(h, kh, stride[0], padding[0], dilation[0])
    wo = _out_extent(w, kw, stride[1], padding[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"degenerate output extent {ho}x{wo} for input {h}x{w}")
    cols = _unfold(x.data.transpose(1, 0, 2, 3), kh, kw, stride, padding, dilation, ho, wo)
    out = _gemm(cols, weight.data, None if bias is None else bias.data)
    wdata = weight.data

    def bw(g):
        gcols, gw, gb = _gemm_backward(g, cols, wdata)
        gx = _fold(gcols, h, w, kh, kw, stride, padding, dilation).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw, gb

    parents = [x, weight] if bias is None else [x, weight, bias]
    return make_result(out, parents, bw, "conv2d")


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2, padding=1) -> Tensor:
    """Transposed convolution; the adjoint of :func:`conv2d` with the same weight.

    ``weight`` has shape ``(Cin, Cout, kh, kw)``: it is the weight of the
    forward convolution mapping ``Cout`` channels to ``Cin``.
    """
    _check_conv_args(x, weight, None)
    stride, padding = _pair(stride), _pair(padding)
    dilation = (1, 1)
    n, cin, hi, wi = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} outputs")
    h = (hi - 1) * stride[0] - 2 * padding[0] + kh
    w = (wi - 1) * stride[1] - 2 * padding[1] + kw
    if h < 1 or w < 1:
        raise ShapeError(f"degenerate output extent {h}x{w}")
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, -1)
    wdata = weight.data
    cols = (wdata.reshape(cin, -1).T @ xt).reshape(cout, kh * kw, n, hi, wi)
    out = _fold(cols, h, w, kh, kw, stride, padding, dilation)
    if bias is not None:
        out += bias.data.reshape(cout, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gcols = _unfold(g.transpose(1, 0, 2, 3), kh, kw, stride, padding, dilation, hi, wi)
        flat = gcols.reshape(cout * kh * kw, -1)
        gx = (wdata.reshape(cin, -1) @ flat).reshape(cin, n, hi, wi).transpose(1, 0, 2, 3)
        gw = (xt @ flat.T).reshape(wdata.shape)
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    parents = [x, weight] if bias is None else [x, weight, bias]
    return make_result(out, parents, bw, "transpose_conv2d")


# ---------------------------------------------------------------------------
# bilinear sampling and modulated deformable convolution
# ---------------------------------------------------------------------------


def bilinear_sample(x, px: float, py: float, n: int = 0, c: int = 0) -> float:
    """Value of channel ``c`` of image ``n`` at fractional position ``(px, py)``.

    ``px`` indexes width and ``py`` height. Neighbours outside the image read 0.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    img = data[n, c]
    h, w = img.shape
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    lx, ly = px - x0, py - y0
    total = 0.0
    for yy, wy in ((y0, 1.0 - ly), (y0 + 1, ly)):
        for xx, wx in ((x0, 1.0 - lx), (x0 + 1, lx)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * float(img[yy, xx])
    return total


def bilinear_sample_adjoint(x, px: float, py: float, n: int = 0, c: int = 0, grad: float = 1.0):
    """Gradient of ``grad * bilinear_sample(x, px, py, n, c)``.

    Returns ``(gx, gpx, gpy)`` where ``gx`` has the shape of ``x``. At integer
    coordinates the one-sided (right) derivative is returned.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, w = data.shape[2:]
    gx = np.zeros(data.shape, dtype=np.float64)
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    lx, ly = px - x0, py - y0

    def v(yy, xx):
        return float(data[n, c, yy, xx]) if 0 <= yy < h and 0 <= xx < w else 0.0

    for yy, wy in ((y0, 1.0 - ly), (y0 + 1, ly)):
        for xx, wx in ((x0, 1.0 - lx), (x0 + 1, lx)):
            if 0 <= yy < h and 0 <= xx < w:
                gx[n, c, yy, xx] += grad * wy * wx
    gpx = grad * ((1.0 - ly) * (v(y0, x0 + 1) - v(y0, x0)) + ly * (v(y0 + 1, x0 + 1) - v(y0 + 1, x0)))
    gpy = grad * ((1.0 - lx) * (v(y0 + 1, x0) - v(y0, x0)) + lx * (v(y0 + 1, x0 + 1) - v(y0, x0 + 1)))
    return gx, gpx, gpy


def _corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Gather indices, validity and bilinear weights for the four corners.

    ``py``/``px`` have shape (K, N, ho, wo). Indices address a flattened
    (N, h, w) plane; out-of-bounds corners get index 0 and validity False.
    Corner order is (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1).
    """
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    nidx = np.arange(py.shape[1]).reshape(1, -1, 1, 1) * (h * w)
    one = py.dtype.type(1)
    idx, valid, weight = [], [], []
    for dy, wy in ((0, one - ly), (1, ly)):
        yy = y0 + dy
        vy = (yy >= 0) & (yy < h)
        for dx, wx in ((0, one - lx), (1, lx)):
            xx = x0 + dx
            ok = vy & (xx >= 0) & (xx < w)
            idx.append(np.where(ok, nidx + yy * w + xx, 0))
            valid.append(ok)
            weight.append(wy * wx)
    return idx, valid, weight, ly, lx


def _sparse_rows(idx, coeffs, n_cols: int) -> sp.csr_matrix:
    """CSR matrix with one row per sample point and four corner entries per row."""
    m = idx[0].size
    indices = np.stack([i.ravel() for i in idx], axis=1).ravel()
    data = np.stack([c.ravel() for c in coeffs], axis=1).ravel()
    indptr = np.arange(0, 4 * m + 1, 4, dtype=np.int64)
    return sp.csr_matrix((data, indices, indptr), shape=(m, n_cols))


def _sampling_grid(offsets: np.ndarray, kh, kw, padding, dilation, ho, wo):
    """Absolute sample positions (K, N, ho, wo) for every tap."""
    (ph, pw), (dh, dw) = padding, dilation
    dt = offsets.dtype
    dx = offsets[:, 0::2].transpose(1, 0, 2, 3)
    dy = offsets[:, 1::2].transpose(1, 0, 2, 3)
    ti, tj = np.divmod(np.arange(kh * kw), kw)
    base_y = (np.arange(ho)[None, :] - ph + ti[:, None] * dh).astype(dt)
    base_x = (np.arange(wo)[None, :] - pw + tj[:, None] * dw).astype(dt)
    py = base_y[:, None, :, None] + dy
    px = base_x[:, None, None, :] + dx
    return py, px


def modulated_deform_conv(
    x: Tensor,
    offsets: Tensor,
    mask: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    padding=1,
    dilation=1,
) -> Tensor:
    """Stride-1 convolution whose taps read bilinear samples at learned offsets.

    Each tap ``j`` of output position ``(y, x)`` reads the input at its regular
    grid location displaced by ``(dx_j, dy_j)`` and scales the sample by the
    modulation ``mask[:, j]`` before the weighted sum.

    ``offsets`` is ``(N, 2K, Ho, Wo)`` and ``mask`` is ``(N, K, Ho, Wo)``.
    """
    _check_conv_args(x, weight, bias)
    padding, dilation = _pair(padding), _pair(dilation)
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    k = kh * kw
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    ho = _out_extent(h, kh, 1, padding[0], dilation[0])
    wo = _out_extent(w, kw, 1, padding[1], dilation[1])
    if offsets.shape != (n, 2 * k, ho, wo):
        raise ShapeError(f"offsets {offsets.shape} do not match expected {(n, 2 * k, ho, wo)}")
    if mask.shape != (n, k, ho, wo):
        raise ShapeError(f"mask {mask.shape} does not match expected {(n, k, ho, wo)}")

    xflat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, -1)
    py, px = _sampling_grid(offsets.data, kh, kw, padding, dilation, ho, wo)
    if _kink_probe is not None:
        _kink_probe.append(np.floor(py))
        _kink_probe.append(np.floor(px))
    idx, valid, cw, ly, lx = _corners(py, px, h, w)
    interp = _sparse_rows(idx, [wt * ok for wt, ok in zip(cw, valid)], n * h * w)
    # (K*N*ho*wo, C) -> column buffer (C, K, N, ho, wo)
    sampled = np.ascontiguousarray((interp @ xflat.T).T).reshape(c, k, n, ho, wo)
    m = mask.data.transpose(1, 0, 2, 3)
    cols = sampled * m
    out = _gemm(cols, weight.data, None if bias is None else bias.data)
    wdata = weight.data

    def bw(g):
        gcols, gw, gb = _gemm_backward(g, cols, wdata)
        gmask = np.einsum("ckntv,ckntv->kntv", gcols, sampled).transpose(1, 0, 2, 3)
        gs = (gcols * m).reshape(c, -1)
        gx = (interp.T @ gs.T).T.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        one = ly.dtype.type(1)
        ddx = _sparse_rows(idx, [-(one - ly) * valid[0], (one - ly) * valid[1], -ly * valid[2], ly * valid[3]], n * h * w)
        ddy = _sparse_rows(idx, [-(one - lx) * valid[0], -lx * valid[1], (one - lx) * valid[2], lx * valid[3]], n * h * w)
        goff = np.empty((n, 2 * k, ho, wo), dtype=x.data.dtype)
        goff[:, 0::2] = np.einsum("mc,cm->m", ddx @ xflat.T, gs).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
        goff[:, 1::2] = np.einsum("mc,cm->m", ddy @ xflat.T, gs).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), goff, np.ascontiguousarray(gmask), gw, gb

    parents = [x, offsets, mask, weight] + ([] if bias is None else [bias])
    return make_result(out, parents, bw, "modulated_deform_conv")


# ---------------------------------------------------------------------------
# pointwise and reductions
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = x.data
    s = d.dtype.type(slope)
    pos = d >= 0
    if _kink_probe is not None:
        _kink_probe.append(pos)
    out = np.where(pos, d, d * s)
    return make_result(out, [x], lambda g: (np.where(pos, g, g * s),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_result(out, [x], lambda g: (g * out * (1 - out),), "sigmoid")


def activation(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def adaptive_avg_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.data.dtype)
    inv = x.data.dtype.type(1.0 / (h * w))
    return make_result(out, [x], lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "avg_pool_global")


def channel_mean(x: Tensor) -> Tensor:
    """Per-position mean over channels, shape (N, 1, H, W)."""
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    inv = x.data.dtype.type(1.0 / c)
    return make_result(out, [x], lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "channel_mean")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over channels of an (N, C, 1, 1) tensor; weight is (Cout, Cin)."""
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"linear expects (N, C, 1, 1) input, got {x.shape}")
    cout, cin = weight.shape
    if cin != c:
        raise ShapeError(f"input has {c} features, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} outputs")
    xm = x.data.reshape(n, c)
    out = xm @ weight.data.T
    if bias is not None:
        out = out + bias.data
    wdata = weight.data

    def bw(g):
        gm = g.reshape(n, cout)
        return (gm @ wdata).reshape(n, c, 1, 1), gm.T @ xm, gm.sum(axis=0)

    parents = [x, weight] if bias is None else [x, weight, bias]
    return make_result(out.reshape(n, cout, 1, 1), parents, bw, "linear")
