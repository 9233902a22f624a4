"""Upsampling reconstructor: global image embedding -> full-resolution image."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .jigsaw import IMAGE_SIZE

INIT_GAIN = 2.0
INIT_NOISE = 0.01
KERNEL, STRIDE, PADDING, OUTPUT_PADDING = 7, 3, 1, 2

# 32-wide stand-in embeddings use a 1x1 seed so the channel plan matches the 512 case
DEFAULT_SEED_SHAPES = {512: (32, 4, 4), 32: (32, 1, 1)}


def stage_output_size(n: int) -> int:
    """Spatial size after one up-stage; equals ``3 * n + 4`` for the fixed geometry."""
    return (n - 1) * STRIDE - 2 * PADDING + KERNEL + OUTPUT_PADDING


def default_seed_shape(d_v: int):
    if d_v in DEFAULT_SEED_SHAPES:
        return DEFAULT_SEED_SHAPES[d_v]
    # fall back to a 2x2 seed with d_v / 4 channels
    if d_v % 4:
        raise ValueError(f"no default seed reshape for embedding width {d_v}")
    return (d_v // 4, 2, 2)


class Reconstructor(nn.Module):
    """Four transposed convolutions (kernel 7, stride 3, padding 1, output padding 2).

    The embedding is reshaped to ``seed_shape``; the first three stages halve
    the channel count, the last emits RGB, and a bilinear resize lands on
    224x224.
    """

    def __init__(self, d_v: int, seed_shape=None):
        super().__init__()
        self.d_v = d_v
        self.seed_shape = tuple(seed_shape or default_seed_shape(d_v))
        c0, h0, w0 = self.seed_shape
        if c0 * h0 * w0 != d_v:
            raise ValueError(f"seed shape {self.seed_shape} does not hold {d_v} values")
        if c0 < 8:
            raise ValueError("seed needs at least 8 channels to halve three times")
        chans = [c0, c0 // 2, c0 // 4, c0 // 8, 3]
        self.stages = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, KERNEL, stride=STRIDE, padding=PADDING, output_padding=OUTPUT_PADDING)
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.reset_parameters()

    def reset_parameters(self):
        """Start every stage as a smooth x3 upsampler with random channel mixing.

        The 1-D tent ``[0, 1/3, 2/3, 1, 2/3, 1/3, 0]`` at stride 3 is a partition
        of unity, so away from the borders a constant input map stays constant.
        Plain random kernels make a flat colour field nearly unreachable for SGD.
        """
        tent = torch.tensor([0.0, 1 / 3, 2 / 3, 1.0, 2 / 3, 1 / 3, 0.0])
        kernel = torch.outer(tent, tent)
        for stage in self.stages:
            cin, cout = stage.in_channels, stage.out_channels
            with torch.no_grad():
                mix = torch.randn(cin, cout) * math.sqrt(INIT_GAIN / cin)
                stage.weight.copy_(mix[:, :, None, None] * kernel + INIT_NOISE * torch.randn_like(stage.weight))
                stage.bias.zero_()

    def forward(self, z, return_stages: bool = False):
        if z.ndim != 2 or z.shape[1] != self.d_v:
            raise ValueError(f"expected (B, {self.d_v}) embeddings, got {tuple(z.shape)}")
        h = z.reshape(z.shape[0], *self.seed_shape)
        sizes = [tuple(h.shape[-2:])]
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i < len(self.stages) - 1:
                h = F.silu(h)
            sizes.append(tuple(h.shape[-2:]))
        out = F.interpolate(h, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear", align_corners=False)
        return (out, sizes) if return_stages else out


def reconstruct(embedding, params: Reconstructor):
    return params(embedding)
