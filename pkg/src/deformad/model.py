"""Encoder, quantized-memory decoder, mask head, background template.

Two forward pipelines share the components. The reference-warping
pipeline decodes a prototype reference first and deforms it toward the
input; the input-warping pipeline deforms the input first, encodes the
normalized result, and keeps backward fields for cycle consistency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .config import ExperimentConfig
from .deform import (
    DeformationPyramid,
    OffsetEstimator,
    apply_deformation,
    positional_embed,
)
from .layers import Conv2d, ConvTranspose2d
from .numeric.tensor import Tensor
from .quantize import MemoryBank, QuantizedEmbedding, SkipReducer, quantize


@dataclass
class ForwardOutputs:
    z_e: Tensor
    quantized: QuantizedEmbedding | None
    pyramid: DeformationPyramid | None
    reference: Tensor                 # decoded prototype image
    deformed: list                    # x-tilde per head (reference pipeline)
    reconstructions: list             # x-hat per head; final is [-1]
    mask: Tensor | None
    target: Tensor                    # what the reconstructions chase
    warped_input: Tensor | None = None  # input-warping pipeline only


def compose_fg_bg(x_tilde: Tensor, mask, x_bg) -> Tensor:
    """Blend foreground reconstruction over the learned background."""
    if mask is None or x_bg is None:
        return x_tilde
    return mask * x_tilde + (1.0 - mask) * x_bg


class Model:
    """All learnable state for one experiment, independent of the trainer."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        img = config.image
        w0, w1 = config.encoder.widths
        depth = config.memory.depth
        seeds = np.random.SeedSequence(config.seed).spawn(8)
        rngs = [np.random.default_rng(s) for s in seeds]

        self.stem = Conv2d(img.channels, w0, 3, 1, 1, rngs[0], "encoder.stem")
        self.down1 = Conv2d(w0, w1, 3, 2, 1, rngs[0], "encoder.down1")
        self.down2 = Conv2d(w1, depth, 3, 2, 1, rngs[0], "encoder.down2")

        self.skip = (SkipReducer(w1, config.skip.reduction,
                                 seed=int(seeds[1].generate_state(1)[0]))
                     if config.skip.enabled else None)
        skip_ch = self.skip.out_channels if self.skip else 0

        self.up1 = ConvTranspose2d(depth + 2, w1, 4, 2, 1, rngs[2], "decoder.up1")
        self.up2 = ConvTranspose2d(w1 + skip_ch, w0, 4, 2, 1, rngs[2],
                                   "decoder.up2")
        self.out_conv = Conv2d(w0, img.channels, 3, 1, 1, rngs[2], "decoder.out")

        self.use_background = not config.ablation.no_background
        if self.use_background:
            self.mask1 = Conv2d(w0, max(w0 // 2, 4), 3, 1, 1, rngs[3], "mask.c1")
            self.mask2 = Conv2d(max(w0 // 2, 4), 1, 3, 1, 1, rngs[3], "mask.c2")
            self.x_bg = Tensor(np.zeros((1, img.channels, img.height, img.width)),
                               requires_grad=True, name="background")
        else:
            self.mask1 = self.mask2 = self.x_bg = None

        self.use_memory = not config.ablation.no_memory
        self.bank = (MemoryBank.initialize(depth, config.memory.items,
                                           seed=int(seeds[4].generate_state(1)[0]))
                     if self.use_memory else None)

        self.use_deform = not config.ablation.no_deform
        if self.use_deform:
            heads = [tuple(r) for r in config.deform.head_resolutions]
            if config.ablation.single_head:
                heads = [heads[-1]]
            self.estimator = OffsetEstimator(
                img.channels, (img.height, img.width), heads,
                trunk_width=config.deform.trunk_width,
                bidirectional=(config.mode == "ppdm"), rng=rngs[5])
        else:
            self.estimator = None

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self):
        params = []
        for layer in (self.stem, self.down1, self.down2, self.up1, self.up2,
                      self.out_conv, self.mask1, self.mask2):
            if layer is not None:
                params.extend(layer.parameters())
        if self.skip is not None:
            params.extend(self.skip.parameters())
        if self.x_bg is not None:
            params.append(self.x_bg)
        if self.bank is not None:
            params.append(self.bank.items)
        if self.estimator is not None:
            params.extend(self.estimator.parameters())
        return [(p.name or f"param{idx}", p) for idx, p in enumerate(params)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def all_finite(self):
        return all(np.all(np.isfinite(p.data)) for p in self.parameters())

    # -- pipeline pieces ---------------------------------------------------------

    def encode(self, x: Tensor):
        """Strided feature pyramid; returns (z_e, stem, mid activations)."""
        stem = self.stem(x).relu()
        mid = self.down1(stem).relu()
        z_e = self.down2(mid)
        return z_e, stem, mid

    def decode(self, z: Tensor, skip_features=None) -> Tensor:
        """Transpose-conv decoding of PE(z) into a [-1, 1] image."""
        h = self.up1(positional_embed(z)).relu()
        if self.skip is not None:
            if skip_features is None:
                raise ValueError("skip path enabled but no features supplied")
            h = nm.concat([h, self.skip(skip_features)], axis=1)
        h = self.up2(h).relu()
        return self.out_conv(h).tanh()

    def mask_for(self, stem: Tensor):
        if not self.use_background:
            return None
        return self.mask2(self.mask1(stem).relu()).sigmoid()

    def _autoencode(self, x: Tensor, training: bool):
        z_e, stem, mid = self.encode(x)
        if self.use_memory:
            q = quantize(z_e, self.bank, update_usage=training)
            decoder_input = q.straight_through
        else:
            q = None
            decoder_input = z_e
        reference = self.decode(decoder_input,
                                skip_features=mid if self.skip else None)
        mask = self.mask_for(stem)
        return z_e, q, reference, mask

    # -- forward pipelines ----------------------------------------------------------

    def forward_pdm(self, x: Tensor, training=False) -> ForwardOutputs:
        """Reconstruct from memory, then warp the reference toward x."""
        if self.config.mode != "pdm":
            raise ValueError("forward_pdm called on a ppdm-mode model")
        z_e, q, reference, mask = self._autoencode(x, training)
        if self.use_deform:
            pyramid = self.estimator(x)
            deformed = [apply_deformation(reference, pyramid, k)
                        for k in range(1, pyramid.n_heads + 1)]
        else:
            pyramid = None
            deformed = [reference]
        recons = [compose_fg_bg(xt, mask, self.x_bg) for xt in deformed]
        return ForwardOutputs(z_e=z_e, quantized=q, pyramid=pyramid,
                              reference=reference, deformed=deformed,
                              reconstructions=recons, mask=mask, target=x)

    def forward_ppdm(self, x: Tensor, training=False) -> ForwardOutputs:
        """Warp the input toward the prototype frame, then reconstruct it."""
        if self.config.mode != "ppdm":
            raise ValueError("forward_ppdm called on a pdm-mode model")
        pyramid = self.estimator(x)
        x_fwd = apply_deformation(x, pyramid)
        z_e, q, reference, mask = self._autoencode(x_fwd, training)
        recon = compose_fg_bg(reference, mask, self.x_bg)
        return ForwardOutputs(z_e=z_e, quantized=q, pyramid=pyramid,
                              reference=reference, deformed=[reference],
                              reconstructions=[recon], mask=mask,
                              target=x_fwd, warped_input=x_fwd)

    def forward(self, x: Tensor, training=False) -> ForwardOutputs:
        if self.config.mode == "ppdm":
            return self.forward_ppdm(x, training=training)
        return self.forward_pdm(x, training=training)
