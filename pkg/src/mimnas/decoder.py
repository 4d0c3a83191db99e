"""Reconstruction heads over the encoder feature pyramid.

The hierarchical head projects each pyramid level to a common width,
upsamples the coarser levels to full resolution, sums, and maps to RGB:

    out = Linear(Conv(F1) + Upsample(Conv(F2), 2) + Upsample(Conv(F3), 4))

"Conv" and "Linear" are 1x1 convolutions.  The flat head is the ablation:
it uses only F3.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .supernet import FeaturePyramid, SupernetError


@dataclass
class DecoderConfig:
    embed_width: int = 64
    upsample_mode: str = "nearest"
    output_channels: int = 3
    use_hierarchical: bool = True

    def __post_init__(self):
        if self.embed_width <= 0:
            raise ValueError(f"embed_width must be positive, got {self.embed_width}")


def _proj(c_in: int, c_out: int) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, 1)
    nn.init.zeros_(conv.bias)
    return conv


class HierarchicalDecoder(nn.Module):
    """Per-level 1x1 projection, upsample to full resolution, sum, RGB head."""

    def __init__(self, pyramid_channels: tuple[int, int, int], cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = pyramid_channels
        d = cfg.embed_width
        self.proj1 = _proj(c1, d)
        self.proj2 = _proj(c2, d)
        self.proj3 = _proj(c3, d)
        self.head = _proj(d, cfg.output_channels)

    def forward(self, pyr: FeaturePyramid) -> torch.Tensor:
        h, w = pyr.f1.shape[-2:]
        pyr.check((h, w))
        mode = self.cfg.upsample_mode
        merged = (
            self.proj1(pyr.f1)
            + F.interpolate(self.proj2(pyr.f2), scale_factor=2, mode=mode)
            + F.interpolate(self.proj3(pyr.f3), scale_factor=4, mode=mode)
        )
        return self.head(merged)


class FlatDecoder(nn.Module):
    """Ablation head: only the coarsest feature map, upsampled x4."""

    def __init__(self, pyramid_channels: tuple[int, int, int], cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.proj3 = _proj(pyramid_channels[2], cfg.embed_width)
        self.head = _proj(cfg.embed_width, cfg.output_channels)

    def forward(self, pyr: FeaturePyramid) -> torch.Tensor:
        h, w = pyr.f1.shape[-2:]
        pyr.check((h, w))
        up = F.interpolate(self.proj3(pyr.f3), scale_factor=4, mode=self.cfg.upsample_mode)
        return self.head(up)


def build_decoder(pyramid_channels: tuple[int, int, int], cfg: DecoderConfig) -> nn.Module:
    cls = HierarchicalDecoder if cfg.use_hierarchical else FlatDecoder
    return cls(pyramid_channels, cfg)


def decode(pyr: FeaturePyramid, decoder: nn.Module) -> torch.Tensor:
    """Reconstruct an image batch from the pyramid; output matches input size."""
    out = decoder(pyr)
    if out.shape[-2:] != pyr.f1.shape[-2:]:
        raise SupernetError(
            f"decoder output {tuple(out.shape[-2:])} does not match "
            f"input resolution {tuple(pyr.f1.shape[-2:])}")
    return out
