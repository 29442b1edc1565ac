"""Differentiable bilinear sampling, upsampling and finite differences.

Coordinate convention is align-corners: -1 is the first pixel center and
+1 the last, so one pixel of displacement equals 2/(extent-1) in grid
units. Out-of-range coordinates clamp to the border.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, default_dtype


def identity_grid(h, w, dtype=None):
    """Reference coordinates, shape (h, w, 2) with (x, y) last."""
    dtype = dtype or default_dtype()
    gx = pixel_centers(w, dtype)
    gy = pixel_centers(h, dtype)
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = gx[None, :]
    grid[..., 1] = gy[:, None]
    return grid


def pixel_centers(n, dtype=None):
    """Normalized coordinates of the n pixel centers along one axis."""
    ty = np.dtype(dtype).type if dtype is not None else default_dtype()
    if n == 1:
        return np.zeros(1, dtype=ty)
    a = ty(n - 1)
    return ((2 * np.arange(n, dtype=ty)) - a) / a


def _unnormalize(g, extent, dtype):
    # map [-1,1] to [0, extent-1], snapping float noise onto pixel centers
    # so reference-coordinate sampling is exactly the identity
    half = (dtype(extent) - dtype(1.0)) * dtype(0.5)
    f = g * half + half
    snapped = np.rint(f)
    tol = 32 * np.finfo(dtype).eps * max(1.0, float(extent - 1))
    return np.where(np.abs(f - snapped) <= tol, snapped, f)


def _sample_parts(x, grid):
    n, c, h, w = x.shape
    dtype = x.dtype.type
    fx = _unnormalize(grid[..., 0], w, dtype)
    fy = _unnormalize(grid[..., 1], h, dtype)
    # border clamp; remember where the coordinate was live for grid grads
    in_x = (fx >= 0.0) & (fx <= w - 1)
    in_y = (fy >= 0.0) & (fy <= h - 1)
    fx = np.clip(fx, 0.0, w - 1)
    fy = np.clip(fy, 0.0, h - 1)
    x0 = np.floor(fx).astype(np.intp)
    y0 = np.floor(fy).astype(np.intp)
    wx = fx - x0
    wy = fy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, wx, wy, in_x, in_y


def _gather(x, yy, xx):
    # x: (N,C,H,W); yy/xx: (N,Hg,Wg) -> (N,C,Hg,Wg)
    n = x.shape[0]
    batch = np.arange(n)[:, None, None]
    return x[batch, :, yy, xx].transpose(0, 3, 1, 2)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear interpolation of x at grid locations, border-clamped.

    Differentiable with respect to both the image values and the grid
    coordinates. x is (N,C,H,W); grid is (N,Hg,Wg,2) normalized (x,y).
    """
    if x.data.ndim != 4 or grid.data.ndim != 4 or grid.shape[-1] != 2:
        raise ValueError(f"grid_sample expects (N,C,H,W) input and "
                         f"(N,Hg,Wg,2) grid, got {x.shape} and {grid.shape}")
    if x.shape[0] != grid.shape[0]:
        raise ValueError(f"batch mismatch: input {x.shape[0]} vs grid "
                         f"{grid.shape[0]}")
    n, c, h, w = x.shape
    x0, x1, y0, y1, wx, wy, in_x, in_y = _sample_parts(x.data, grid.data)
    i00 = _gather(x.data, y0, x0)
    i01 = _gather(x.data, y0, x1)
    i10 = _gather(x.data, y1, x0)
    i11 = _gather(x.data, y1, x1)
    wxe = wx[:, None]
    wye = wy[:, None]
    top = i00 + wxe * (i01 - i00)
    bot = i10 + wxe * (i11 - i10)
    out = top + wye * (bot - top)

    def backward(dout):
        dtype = x.data.dtype
        # image gradient: scatter-add the four corner weights
        w00 = (1.0 - wxe) * (1.0 - wye)
        w01 = wxe * (1.0 - wye)
        w10 = (1.0 - wxe) * wye
        w11 = wxe * wye
        plane = h * w
        base = (np.arange(n)[:, None, None] * c * plane
                + np.arange(c)[None, :, None] * plane)
        flat00 = (base + (y0 * w + x0).reshape(n, 1, -1)).ravel()
        flat01 = (base + (y0 * w + x1).reshape(n, 1, -1)).ravel()
        flat10 = (base + (y1 * w + x0).reshape(n, 1, -1)).ravel()
        flat11 = (base + (y1 * w + x1).reshape(n, 1, -1)).ravel()
        dflat = dout.reshape(n, c, -1)
        total = n * c * plane
        dx = (np.bincount(flat00, (w00 * dout).reshape(n, c, -1).ravel(), total)
              + np.bincount(flat01, (w01 * dout).reshape(n, c, -1).ravel(), total)
              + np.bincount(flat10, (w10 * dout).reshape(n, c, -1).ravel(), total)
              + np.bincount(flat11, (w11 * dout).reshape(n, c, -1).ravel(), total))
        dx = dx.reshape(x.shape).astype(dtype, copy=False)

        # grid gradient: bilinear slope, zero where the point was clamped
        dfx = ((1.0 - wye) * (i01 - i00) + wye * (i11 - i10)) * dout
        dfy = ((1.0 - wxe) * (i10 - i00) + wxe * (i11 - i01)) * dout
        dgx = dfx.sum(axis=1) * in_x * ((w - 1) * 0.5)
        dgy = dfy.sum(axis=1) * in_y * ((h - 1) * 0.5)
        dgrid = np.stack([dgx, dgy], axis=-1).astype(dtype, copy=False)
        return dx, dgrid

    return _make(out, (x, grid), "grid_sample", backward)


def _interp_matrix(src, dst, dtype):
    # (dst, src) row-stochastic bilinear weights, align-corners
    ty = np.dtype(dtype).type
    m = np.zeros((dst, src), dtype=dtype)
    if src == 1:
        m[:, 0] = 1.0
        return m
    scale = ty(src - 1) / ty(dst - 1)
    for i in range(dst):
        f = i * scale
        i0 = int(np.floor(f))
        i0 = min(i0, src - 2)
        t = f - i0
        if t == 0.0:
            m[i, i0] = 1.0
        else:
            m[i, i0] = 1.0 - t
            m[i, i0 + 1] = t
    return m


def bilinear_upsample(x: Tensor, target) -> Tensor:
    """Align-corners bilinear enlargement of an (N,C,h,w) tensor."""
    th, tw = target
    n, c, h, w = x.shape
    if th < h or tw < w:
        raise ValueError(f"target {target} smaller than source ({h}, {w})")
    dtype = x.data.dtype
    mr = _interp_matrix(h, th, dtype)
    mc = _interp_matrix(w, tw, dtype)
    out = np.einsum("Hh,nchw,Ww->ncHW", mr, x.data, mc, optimize=True)

    def backward(dout):
        return (np.einsum("Hh,ncHW,Ww->nchw", mr, dout, mc, optimize=True),)

    return _make(np.ascontiguousarray(out), (x,), "bilinear_upsample", backward)


def spatial_gradient(field: Tensor):
    """Forward differences along width (dx) and height (dy).

    The trailing column/row of each difference map is zero, which keeps
    the operator defined on 1-pixel-wide coarse fields' partner axis.
    """
    if field.data.ndim != 4:
        raise ValueError("spatial_gradient expects an (N,C,H,W) tensor")
    n, c, h, w = field.shape
    if h < 2 or w < 2:
        raise ValueError(f"spatial_gradient needs H,W >= 2, got {h}x{w}")

    dx_data = np.zeros_like(field.data)
    dx_data[..., :-1] = field.data[..., 1:] - field.data[..., :-1]
    dy_data = np.zeros_like(field.data)
    dy_data[..., :-1, :] = field.data[..., 1:, :] - field.data[..., :-1, :]

    def backward_dx(dout):
        g = np.zeros_like(field.data)
        g[..., :-1] -= dout[..., :-1]
        g[..., 1:] += dout[..., :-1]
        return (g,)

    def backward_dy(dout):
        g = np.zeros_like(field.data)
        g[..., :-1, :] -= dout[..., :-1, :]
        g[..., 1:, :] += dout[..., :-1, :]
        return (g,)

    dx = _make(dx_data, (field,), "spatial_gradient_x", backward_dx)
    dy = _make(dy_data, (field,), "spatial_gradient_y", backward_dy)
    return dx, dy
