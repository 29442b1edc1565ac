"""Coarse-to-fine offset fields: estimation, application, regularizers.

Offsets live in normalized align-corners units, so one pixel of
displacement along x is 2/(W-1). Channel 0 is the x offset, channel 1
the y offset. Fields are upsampled to image resolution before sampling,
and head 1 (coarsest) is applied first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .layers import Conv2d
from .numeric.tensor import Tensor


@dataclass
class DeformationPyramid:
    forward: list                      # K tensors, each (B, 2, Hk, Wk)
    head_resolutions: list
    backward: list | None = None

    @property
    def n_heads(self):
        return len(self.forward)

    def require_backward(self):
        if self.backward is None:
            raise ValueError("pyramid has no backward fields; build the "
                             "estimator with bidirectional=True")


def positional_grid(h, w, dtype=None):
    """Two channels of normalized coordinates; corners are exactly +-1."""
    if h < 2 or w < 2:
        raise ValueError(f"positional grid needs H,W >= 2, got {h}x{w}")
    grid = nm.identity_grid(h, w, dtype=dtype)       # (h, w, 2), (x, y) last
    return np.ascontiguousarray(grid.transpose(2, 0, 1))


def positional_embed(x: Tensor) -> Tensor:
    """Append the coordinate channels: (B, C, H, W) -> (B, C+2, H, W)."""
    b, _, h, w = x.shape
    grid = positional_grid(h, w, dtype=x.data.dtype)
    planes = np.broadcast_to(grid[None], (b, 2, h, w))
    return nm.concat([x, Tensor(np.ascontiguousarray(planes),
                                dtype=x.data.dtype)], axis=1)


class OffsetEstimator:
    """Shared stride-2 trunk over PE(x); one small head per output field.

    Heads tap the trunk stage whose resolution matches theirs, and their
    raw outputs go through tanh then a [-1, 1] clip, so every emitted
    offset is in range by construction. With ``bidirectional=True`` the
    trunk carries 2K heads (K forward + K backward).
    """

    def __init__(self, in_channels, image_hw, head_resolutions,
                 trunk_width=16, bidirectional=False, rng=None):
        rng = rng or np.random.default_rng(0)
        self.image_hw = tuple(image_hw)
        self.head_resolutions = [tuple(r) for r in head_resolutions]
        if not self.head_resolutions:
            raise ValueError("need at least one head resolution")
        for (h0, w0), (h1, w1) in zip(self.head_resolutions,
                                      self.head_resolutions[1:]):
            if h1 < h0 or w1 < w0:
                raise ValueError("head resolutions must be nondecreasing "
                                 "(coarse first)")
        self.bidirectional = bidirectional

        h, w = self.image_hw
        needed = {res for res in self.head_resolutions}
        self.trunk = []
        self._stage_res = []
        cin = in_channels + 2
        res = (h, w)
        width = trunk_width
        smallest = min(r[0] for r in needed), min(r[1] for r in needed)
        while res[0] > smallest[0] or res[1] > smallest[1]:
            block = Conv2d(cin, width, 3, stride=2, padding=1, rng=rng,
                           name=f"deform.trunk{len(self.trunk)}")
            self.trunk.append(block)
            cin = width
            width = min(width * 2, 64)
            res = ((res[0] + 1) // 2, (res[1] + 1) // 2)
            self._stage_res.append(res)
        missing = [r for r in needed if r not in self._stage_res]
        if missing:
            raise ValueError(f"head resolutions {missing} are not reachable "
                             f"by stride-2 stages from {self.image_hw}; "
                             f"stages give {self._stage_res}")

        def make_heads(tag):
            heads = []
            for i, r in enumerate(self.head_resolutions):
                stage = self._stage_res.index(r)
                cin_h = self.trunk[stage].weight.shape[0]
                heads.append((stage, Conv2d(cin_h, 2, 3, stride=1, padding=1,
                                            rng=rng,
                                            name=f"deform.{tag}{i}")))
            return heads

        self.forward_heads = make_heads("head")
        self.backward_heads = make_heads("back") if bidirectional else None

    def parameters(self):
        params = []
        for block in self.trunk:
            params.extend(block.parameters())
        for _, head in self.forward_heads:
            params.extend(head.parameters())
        if self.backward_heads:
            for _, head in self.backward_heads:
                params.extend(head.parameters())
        return params

    def __call__(self, x: Tensor) -> DeformationPyramid:
        feats = positional_embed(x)
        stages = []
        cur = feats
        for block in self.trunk:
            cur = block(cur).relu()
            stages.append(cur)

        def run(heads):
            return [head(stages[stage]).tanh().clip_unit()
                    for stage, head in heads]

        backward = run(self.backward_heads) if self.backward_heads else None
        return DeformationPyramid(forward=run(self.forward_heads),
                                  head_resolutions=self.head_resolutions,
                                  backward=backward)


def estimate_offsets(x: Tensor, estimator: OffsetEstimator) -> DeformationPyramid:
    return estimator(x)


def _field_to_grid(field: Tensor, image_hw) -> Tensor:
    """Upsample a (B,2,h,w) offset field and add reference coordinates."""
    h, w = image_hw
    if field.shape[2] != h or field.shape[3] != w:
        field = nm.bilinear_upsample(field, (h, w))
    offsets = nm.transpose_axes(field, (0, 2, 3, 1))     # (B, H, W, 2)
    base = nm.identity_grid(h, w, dtype=field.data.dtype)
    ref = np.broadcast_to(base[None], offsets.shape)
    return Tensor(np.ascontiguousarray(ref), dtype=field.data.dtype) + offsets


def apply_deformation(reference: Tensor, pyramid: DeformationPyramid,
                      upto=None) -> Tensor:
    """Warp by the first `upto` fields, coarsest first (head 1 first)."""
    k = pyramid.n_heads if upto is None else upto
    if not 1 <= k <= pyramid.n_heads:
        raise ValueError(f"upto must be in [1, {pyramid.n_heads}], got {k}")
    hw = reference.shape[2], reference.shape[3]
    out = reference
    for i in range(k):
        out = nm.grid_sample(out, _field_to_grid(pyramid.forward[i], hw))
    return out


def apply_backward_deformation(image: Tensor, pyramid: DeformationPyramid,
                               from_head=None) -> Tensor:
    """Warp by backward fields in reverse order: O_K^T first, O_1^T last."""
    pyramid.require_backward()
    k = pyramid.n_heads if from_head is None else from_head
    hw = image.shape[2], image.shape[3]
    out = image
    for i in range(k - 1, -1, -1):
        out = nm.grid_sample(out, _field_to_grid(pyramid.backward[i], hw))
    return out


def _field_penalties(fields, smoothness_weight, strength_weight):
    total = None
    for f in fields:
        dx, dy = nm.spatial_gradient(f)
        smooth = (dx.abs() + dy.abs()).sum(axis=1).mean()
        ox = nm.narrow(f, 1, 0, 1)
        oy = nm.narrow(f, 1, 1, 1)
        strength = (ox * ox + oy * oy).sqrt().mean()
        term = smooth * smoothness_weight + strength * strength_weight
        total = term if total is None else total + term
    return total


def deformation_loss(pyramid: DeformationPyramid, smoothness_weight=1.0,
                     strength_weight=1.0) -> Tensor:
    """Sum over heads of mean L1 field gradient plus mean offset magnitude."""
    return _field_penalties(pyramid.forward, smoothness_weight, strength_weight)


def deformation_loss_plus(pyramid: DeformationPyramid, smoothness_weight=1.0,
                          strength_weight=1.0) -> Tensor:
    """Forward plus backward field penalties under identical reductions."""
    pyramid.require_backward()
    return (_field_penalties(pyramid.forward, smoothness_weight, strength_weight)
            + _field_penalties(pyramid.backward, smoothness_weight,
                               strength_weight))


def cycle_loss(x: Tensor, pyramid: DeformationPyramid) -> Tensor:
    """Mean squared residual of the forward-then-backward round trip."""
    pyramid.require_backward()
    warped = apply_deformation(x, pyramid)
    restored = apply_backward_deformation(warped, pyramid)
    return ((x - restored) ** 2).mean()
