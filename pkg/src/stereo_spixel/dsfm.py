"""Decoupled stereo fusion: parallax attention, occlusion masks, masked fusion.

Feature tensors are ``B x C x H x W``; attention maps are ``B x H x W x W``
where ``m[b, i, j, k]`` is the weight that pixel ``(i, j)`` of the target view
gives to pixel ``(i, k)`` of the source view. Only same-row pixels interact.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .core import ValidationError
from .extractor import ConvBNReLU

DEFAULT_TAU = 0.1


class ParallaxAttention(NamedTuple):
    m_r2l: torch.Tensor
    m_l2r: torch.Tensor


class ValidMask(NamedTuple):
    o_l2r: torch.Tensor  # B x H x W, indexed by left-view pixels
    o_r2l: torch.Tensor  # B x H x W, indexed by right-view pixels
    tau: float = DEFAULT_TAU


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def attention_from_projections(a, b):
    """Row-wise softmax of the two batch-wise products ``A B^T`` and ``B A^T``."""
    _check_same(a, b)
    a_rows = a.permute(0, 2, 3, 1)  # B x H x W x C
    b_rows = b.permute(0, 2, 3, 1)
    logits = torch.matmul(a_rows, b_rows.transpose(-1, -2))  # B x H x W x W
    return ParallaxAttention(torch.softmax(logits, dim=-1),
                             torch.softmax(logits.transpose(-1, -2), dim=-1))


def apply_attention(m, f):
    """Mix same-row features of ``f`` with weights ``m`` (B x H x W x W)."""
    rows = f.permute(0, 2, 3, 1)  # B x H x W x C
    if m.shape[:3] != rows.shape[:3] or m.shape[-1] != rows.shape[2]:
        raise ValidationError(
            f"attention {tuple(m.shape)} incompatible with features {tuple(f.shape)}")
    return torch.matmul(m, rows).permute(0, 3, 1, 2)


def align(attn: ParallaxAttention, f_left, f_right):
    """Warp each view's features into the other view's frame."""
    _check_same(f_left, f_right)
    return apply_attention(attn.m_r2l, f_right), apply_attention(attn.m_l2r, f_left)


@torch.no_grad()
def valid_mask(attn: ParallaxAttention, tau=DEFAULT_TAU) -> ValidMask:
    """Binary visibility masks from the column sums of the attention maps.

    A left pixel ``j`` is valid when the right-view pixels of its row give it
    more than ``tau`` attention in total; pixels at or below ``tau`` are treated
    as occluded. The masks carry no gradient.
    """
    o_l2r = (attn.m_l2r.sum(dim=-2) > tau).to(attn.m_l2r.dtype)
    o_r2l = (attn.m_r2l.sum(dim=-2) > tau).to(attn.m_r2l.dtype)
    return ValidMask(o_l2r.detach(), o_r2l.detach(), tau)


def fuse_concat(f_self, f_aligned, mask):
    """Masked selection of aligned features, concatenated with the originals."""
    _check_same(f_self, f_aligned)
    if mask.shape != (f_self.shape[0],) + tuple(f_self.shape[2:]):
        raise ValidationError(f"mask {tuple(mask.shape)} does not match features")
    o = mask.unsqueeze(1)
    return torch.cat([f_aligned * o + f_self * (1 - o), f_self], dim=1)


class DSFM(nn.Module):
    """Parallax attention fusion of a left/right feature pair.

    ``shared_projection`` uses one 1x1 convolution for both views, which keeps
    the module symmetric under swapping the views; otherwise the left and right
    features get their own projections. ``occlusion=False`` replaces the valid
    masks with ones so aligned features are used everywhere.
    """

    def __init__(self, channels, tau=DEFAULT_TAU, shared_projection=True,
                 occlusion=True, fuse_kernel=3):
        super().__init__()
        self.tau = tau
        self.occlusion = occlusion
        self.shared_projection = shared_projection
        self.proj_a = nn.Conv2d(channels, channels, 1)
        self.proj_b = self.proj_a if shared_projection else nn.Conv2d(channels, channels, 1)
        self.reduce = ConvBNReLU(2 * channels, channels, fuse_kernel)

    def attention_maps(self, f_left, f_right) -> ParallaxAttention:
        _check_same(f_left, f_right)
        return attention_from_projections(self.proj_a(f_left), self.proj_b(f_right))

    def masks(self, attn):
        if self.occlusion:
            return valid_mask(attn, self.tau)
        ones = torch.ones_like(attn.m_l2r[..., 0])
        return ValidMask(ones, ones.clone(), self.tau)

    def fuse(self, f_self, f_aligned, mask):
        return self.reduce(fuse_concat(f_self, f_aligned, mask))

    def forward(self, f_left, f_right, views=("left", "right"), reduce=True):
        """Fuse both views; ``reduce=False`` stops before the channel-reducing block."""
        attn = self.attention_maps(f_left, f_right)
        mask = self.masks(attn)
        post = self.reduce if reduce else (lambda t: t)
        out_left = out_right = None
        if "left" in views:
            out_left = post(fuse_concat(f_left, apply_attention(attn.m_r2l, f_right),
                                        mask.o_l2r))
        if "right" in views:
            out_right = post(fuse_concat(f_right, apply_attention(attn.m_l2r, f_left),
                                         mask.o_r2l))
        return out_left, out_right, attn, mask
