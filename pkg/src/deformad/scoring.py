"""Anomaly maps and scores computed from forward outputs.

The reconstruction-error map is per-pixel squared error (channel-summed);
the deformation map is the per-pixel magnitude of the applied offset
fields. In input-warping mode both maps are realigned to the original
pixel frame through the backward fields before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import numeric as nm
from .deform import _field_to_grid
from .numeric.tensor import Tensor


@dataclass
class AnomalyMaps:
    a_rec: np.ndarray            # (H, W), nonnegative
    a_df: np.ndarray             # (H, W), nonnegative
    mode: str                    # "pdm" | "ppdm"


@dataclass
class ScoreRecord:
    sample_id: str
    label: int
    anomaly: bool
    image_score: float
    rec_peak: float
    df_peak: float
    mode: str
    pixel_scores: np.ndarray | None = field(default=None, repr=False)


def make_kernel(kind, kernel_size=16, sigma=4.0, dtype=np.float64):
    """Normalized smoothing kernel: flat box or truncated Gaussian."""
    if kind == "box":
        k = np.ones((kernel_size, kernel_size), dtype=dtype)
    elif kind == "gaussian":
        radius = int(np.ceil(3.0 * sigma))
        ax = np.arange(-radius, radius + 1, dtype=dtype)
        g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
        k = np.outer(g, g)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return k / k.sum()


def smooth_map(map2d, kernel):
    return convolve2d(map2d, kernel, mode="same", boundary="fill")


def _channel_sq_error(a, b):
    diff = a - b
    return (diff * diff).sum(axis=1)          # (B, H, W)


def _magnitude_full_res(field_data, image_hw):
    t = Tensor(field_data, dtype=field_data.dtype)
    h, w = image_hw
    if t.shape[2] != h or t.shape[3] != w:
        t = nm.bilinear_upsample(t, (h, w))
    f = t.data
    return np.sqrt(f[:, 0] ** 2 + f[:, 1] ** 2)   # (B, H, W)


def _warp_through(data_bhw, fields, indices, image_hw):
    """Resample a (B,H,W) map through grids of the listed fields, in order."""
    out = Tensor(data_bhw[:, None])
    for i in indices:
        grid = _field_to_grid(Tensor(fields[i].data), image_hw)
        out = nm.grid_sample(out, grid)
    return out.data[:, 0]


def _compose_field(field_data, fields, indices, image_hw):
    """Warp a 2-channel field through later grids, then take magnitudes."""
    t = Tensor(field_data)
    h, w = image_hw
    if t.shape[2] != h or t.shape[3] != w:
        t = nm.bilinear_upsample(t, (h, w))
    for i in indices:
        grid = _field_to_grid(Tensor(fields[i].data), image_hw)
        t = nm.grid_sample(t, grid)
    f = t.data
    return np.sqrt(f[:, 0] ** 2 + f[:, 1] ** 2)


def anomaly_maps(x, outputs, mode):
    """Per-sample error and deformation-magnitude maps.

    ``x`` is the original input (B,C,H,W array or Tensor); ``outputs``
    must come from the forward pipeline matching ``mode``.
    """
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x)
    b, _, h, w = x_data.shape
    hw = (h, w)
    is_warped_input = outputs.warped_input is not None
    if mode == "pdm" and is_warped_input:
        raise ValueError("pdm-mode maps requested from input-warping outputs")
    if mode == "ppdm" and not is_warped_input:
        raise ValueError("ppdm-mode maps requested from reference-warping "
                         "outputs")

    if mode == "pdm":
        err = _channel_sq_error(x_data, outputs.reconstructions[-1].data)
        df = np.zeros_like(err)
        if outputs.pyramid is not None:
            for f in outputs.pyramid.forward:
                df = df + _magnitude_full_res(f.data, hw)
        return [AnomalyMaps(a_rec=err[i], a_df=df[i], mode=mode)
                for i in range(b)]

    pyramid = outputs.pyramid
    k = pyramid.n_heads
    raw_err = _channel_sq_error(outputs.warped_input.data,
                                outputs.reconstructions[-1].data)
    # realign: error map sampled through O_K^T ... O_1^T
    err = _warp_through(raw_err, pyramid.backward, range(k - 1, -1, -1), hw)

    df = np.zeros_like(err)
    for i in range(k):
        # forward field pushed through the remaining forward deformations
        df = df + _compose_field(pyramid.forward[i].data, pyramid.forward,
                                 range(i + 1, k), hw)
        # backward field pulled back toward the original frame
        df = df + _compose_field(pyramid.backward[i].data, pyramid.backward,
                                 range(i - 1, -1, -1), hw)
    return [AnomalyMaps(a_rec=err[i], a_df=df[i], mode="ppdm")
            for i in range(b)]


def image_score(maps: AnomalyMaps, alpha, kernel) -> tuple[float, float, float]:
    """Peak of the smoothed error map plus alpha times the smoothed
    deformation peak. Returns (score, rec_peak, df_peak)."""
    rec_peak = float(smooth_map(maps.a_rec, kernel).max())
    df_peak = float(smooth_map(maps.a_df, kernel).max())
    return rec_peak + alpha * df_peak, rec_peak, df_peak


def pixel_score(maps: AnomalyMaps, alpha) -> np.ndarray:
    """Per-pixel combined score; defined for realigned (input-warping) maps."""
    if maps.mode != "ppdm":
        raise ValueError("pixel scores are defined for ppdm-mode maps")
    return maps.a_rec + alpha * maps.a_df
