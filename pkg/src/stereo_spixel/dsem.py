"""Dynamic spatiality embedding: normalized coordinates and channel reweighting."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .core import ValidationError
from .extractor import ConvBNReLU


class SpatialGrids(NamedTuple):
    x_hat: torch.Tensor  # H x W
    y_hat: torch.Tensor


def normalize_coords(height, width, dtype=torch.float32, device=None) -> SpatialGrids:
    """1-based column/row indices divided by their maximum; values in (0, 1]."""
    if height < 1 or width < 1:
        raise ValidationError("grid dimensions must be positive")
    xs = torch.arange(1, width + 1, dtype=dtype, device=device) / width
    ys = torch.arange(1, height + 1, dtype=dtype, device=device) / height
    return SpatialGrids(xs.expand(height, width), ys[:, None].expand(height, width))


class SpatialEmbedding(nn.Module):
    """Add each coordinate plane to every channel, embed with a 1x1 convolution,
    and concatenate ``[F_x, F_y, F]`` along channels (3C out)."""

    def __init__(self, channels):
        super().__init__()
        self.embed_x = nn.Conv2d(channels, channels, 1)
        self.embed_y = nn.Conv2d(channels, channels, 1)

    @staticmethod
    def add_grids(f, grids: SpatialGrids):
        if grids.x_hat.shape != f.shape[-2:]:
            raise ValidationError(f"grids {tuple(grids.x_hat.shape)} do not match "
                                  f"features {tuple(f.shape[-2:])}")
        return f + grids.x_hat, f + grids.y_hat

    def forward(self, f, grids=None):
        if grids is None:
            grids = normalize_coords(*f.shape[-2:], dtype=f.dtype, device=f.device)
        fx, fy = self.add_grids(f, grids)
        return torch.cat([self.embed_x(fx), self.embed_y(fy), f], dim=1)


class DynamicFusion(nn.Module):
    """Channel-attention reweighting of the embedded features.

    The coarse block reduces ``in_channels`` to ``channels``; a second block
    followed by global average pooling gives the descriptor ``g``; the weighting
    vector ``g * sigmoid(C2(ReLU(LN(C1(g)))))`` is added back to the coarse
    features before the final block.
    """

    def __init__(self, in_channels, channels, kernel_size=3):
        super().__init__()
        self.coarse = ConvBNReLU(in_channels, channels, kernel_size)
        self.global_block = ConvBNReLU(channels, channels, 1)
        self.fc1 = nn.Linear(channels, channels)
        self.norm = nn.LayerNorm(channels)
        self.fc2 = nn.Linear(channels, channels)
        self.out = ConvBNReLU(channels, channels, kernel_size)

    def weighting(self, g):
        return g * torch.sigmoid(self.fc2(torch.relu(self.norm(self.fc1(g)))))

    def forward(self, f_cat, return_weights=False):
        coarse = self.coarse(f_cat)
        g = self.global_block(coarse).mean(dim=(2, 3))
        w = self.weighting(g)
        out = self.out(coarse + w[:, :, None, None])
        return (out, g, w) if return_weights else out


class DSEM(nn.Module):
    """Spatiality embedding followed by dynamic fusion.

    With both stages disabled the module is the identity. With embedding on and
    dynamic fusion off, a single block reduces the 3C embedding back to C.
    """

    def __init__(self, channels, embed=True, dynamic=True):
        super().__init__()
        self.embed = embed
        self.dynamic = dynamic
        in_channels = 3 * channels if embed else channels
        self.spatial = SpatialEmbedding(channels) if embed else None
        if dynamic:
            self.fusion = DynamicFusion(in_channels, channels)
        elif embed:
            self.fusion = ConvBNReLU(in_channels, channels)
        else:
            self.fusion = None

    def forward(self, f):
        if self.spatial is not None:
            f = self.spatial(f)
        if self.fusion is not None:
            f = self.fusion(f)
        return f
