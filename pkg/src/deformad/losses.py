"""Training loss assembly and the weighted-total bookkeeping record."""

from __future__ import annotations

from dataclasses import dataclass

from . import numeric as nm
from .deform import cycle_loss, deformation_loss, deformation_loss_plus
from .numeric.tensor import Tensor
from .quantize import compression_loss


@dataclass
class LossBreakdown:
    """Scalar components and the weights that combined them."""

    rec: float
    com: float
    df: float
    cyc: float | None
    total: float
    gamma1: float
    gamma2: float
    gamma3: float | None = None

    def weighted_sum(self):
        value = self.rec + self.gamma1 * self.com + self.gamma2 * self.df
        if self.cyc is not None:
            value += (self.gamma3 or 0.0) * self.cyc
        return value


def distance(x: Tensor, x_hat: Tensor, lambda_g: float) -> Tensor:
    """Sample-space distance: MSE plus weighted L1 of gradient differences."""
    mse = ((x - x_hat) ** 2).mean()
    if lambda_g == 0.0:
        return mse
    dx_a, dy_a = nm.spatial_gradient(x)
    dx_b, dy_b = nm.spatial_gradient(x_hat)
    grad_term = (dx_a - dx_b).abs().mean() + (dy_a - dy_b).abs().mean()
    return mse + lambda_g * grad_term


def rec_loss(x: Tensor, reconstructions, lambda_g=1.0) -> Tensor:
    """Sum of per-head distances between the target and each x-hat."""
    if not reconstructions:
        raise ValueError("need at least one reconstruction")
    total = None
    for x_hat in reconstructions:
        if x_hat.shape != x.shape:
            raise ValueError(f"reconstruction shape {x_hat.shape} does not "
                             f"match target {x.shape}")
        term = distance(x, x_hat, lambda_g)
        total = term if total is None else total + term
    return total


def total_loss(l_rec: Tensor, l_com, l_df, gamma1=1.0, gamma2=0.25):
    """Weighted sum for the reference-warping mode; returns (Tensor, record)."""
    total = l_rec
    com_val = 0.0
    if l_com is not None:
        total = total + gamma1 * l_com
        com_val = l_com.item()
    df_val = 0.0
    if l_df is not None:
        total = total + gamma2 * l_df
        df_val = l_df.item()
    record = LossBreakdown(rec=l_rec.item(), com=com_val, df=df_val,
                           cyc=None, total=total.item(),
                           gamma1=gamma1, gamma2=gamma2)
    return total, record


def total_loss_plus(l_rec: Tensor, l_com, l_df_plus, l_cyc,
                    gamma1=1.0, gamma2=1.0, gamma3=1.0):
    """Weighted sum for the input-warping mode, including cycle consistency."""
    if l_cyc is None:
        raise ValueError("input-warping total loss requires the cycle term")
    total = l_rec
    com_val = 0.0
    if l_com is not None:
        total = total + gamma1 * l_com
        com_val = l_com.item()
    df_val = 0.0
    if l_df_plus is not None:
        total = total + gamma2 * l_df_plus
        df_val = l_df_plus.item()
    total = total + gamma3 * l_cyc
    record = LossBreakdown(rec=l_rec.item(), com=com_val, df=df_val,
                           cyc=l_cyc.item(), total=total.item(),
                           gamma1=gamma1, gamma2=gamma2, gamma3=gamma3)
    return total, record


def model_loss(x, outputs, config):
    """Assemble the full training loss for one batch of forward outputs.

    ``x`` is the original input; in input-warping mode the reconstruction
    target inside ``outputs`` is the forward-warped input instead.
    """
    ls = config.loss
    ab = config.ablation
    l_rec = rec_loss(outputs.target, outputs.reconstructions, ls.lambda_g)
    l_com = (compression_loss(outputs.quantized.z_e, outputs.quantized.z_q,
                              ls.beta)
             if outputs.quantized is not None else None)
    smooth_w = 0.0 if ab.no_smoothness else 1.0
    strength_w = 0.0 if ab.no_strength else 1.0
    if config.mode == "ppdm":
        l_df = deformation_loss_plus(outputs.pyramid, smooth_w, strength_w)
        l_cyc = cycle_loss(x, outputs.pyramid)
        return total_loss_plus(l_rec, l_com, l_df, l_cyc,
                               ls.gamma1, ls.gamma2, ls.gamma3)
    l_df = (deformation_loss(outputs.pyramid, smooth_w, strength_w)
            if outputs.pyramid is not None else None)
    return total_loss(l_rec, l_com, l_df, ls.gamma1, ls.gamma2)
