"""Weight-shared multi-scale convolutional feature extractor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .core import ValidationError


class ConvBNReLU(nn.Sequential):
    """Convolution, batch normalization, rectification."""

    def __init__(self, in_channels, out_channels, kernel_size=3):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size,
                      padding=kernel_size // 2, bias=False),
            # torch momentum weights the new batch: 0.1 here == 0.9 decay of the running average
            nn.BatchNorm2d(out_channels, eps=1e-5, momentum=0.1),
            nn.ReLU(inplace=True),
        )


@dataclass(frozen=True)
class ExtractorConfig:
    in_channels: int = 3
    channels: int = 64
    kernel: int = 3
    n_blocks: int = 7
    downsample_after: Tuple[int, ...] = (2, 4)
    tap_blocks: Tuple[int, ...] = (2, 4, 6)
    out_channels: int = 64

    def __post_init__(self):
        if not all(1 <= b < self.n_blocks for b in self.tap_blocks):
            raise ValueError("tap blocks must lie in [1, n_blocks)")
        if any(b > max(self.tap_blocks) for b in self.downsample_after):
            raise ValueError("downsampling after the last tap is wasted work")
        if self.channels <= 0 or self.out_channels <= 0 or self.kernel % 2 == 0:
            raise ValueError("channel counts must be positive and the kernel odd")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("downsample_after", "tap_blocks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class FeatureExtractor(nn.Module):
    """Blocks 1..n-1 with pooling, multi-scale taps, and a fusing final block.

    Taps are upsampled bilinearly to the input size, concatenated, and fused by
    the last block, so the output always has the input's spatial resolution.
    """

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        self.config = config
        blocks = []
        c_in = config.in_channels
        for _ in range(1, config.n_blocks):
            blocks.append(ConvBNReLU(c_in, config.channels, config.kernel))
            c_in = config.channels
        self.blocks = nn.ModuleList(blocks)
        self.fuse = ConvBNReLU(config.channels * len(config.tap_blocks),
                               config.out_channels, config.kernel)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x, return_taps=False):
        h, w = x.shape[-2:]
        n_down = len(self.config.downsample_after)
        if h < 2 ** n_down or w < 2 ** n_down:
            raise ValidationError(f"input {h}x{w} too small for {n_down} downsamplings")
        taps = []
        for idx, block in enumerate(self.blocks, start=1):
            x = block(x)
            if idx in self.config.tap_blocks:
                taps.append(x)
            if idx in self.config.downsample_after:
                x = F.max_pool2d(x, 2)
        up = [t if t.shape[-2:] == (h, w) else
              F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
              for t in taps]
        out = self.fuse(torch.cat(up, dim=1))
        return (out, taps) if return_taps else out

    def extract_pair(self, left, right):
        """Run both views through the same parameters, one view at a time."""
        if left.shape != right.shape:
            raise ValidationError(f"view shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        return self(left), self(right)
