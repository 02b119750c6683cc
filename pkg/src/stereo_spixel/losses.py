"""Semantic reconstruction loss, masked stereo photometric loss, and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import ValidationError
from .dsfm import ParallaxAttention, ValidMask, apply_attention

LOG_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    lambda_stereo: float = 1.0

    def __post_init__(self):
        if not self.lambda_stereo >= 0:
            raise ValueError("lambda_stereo must be non-negative")


def semantic_loss(s_onehot, s_star):
    """Pixel-mean cross entropy between one-hot labels and reconstructed labels.

    Both inputs are B x K x H x W.
    """
    if s_onehot.shape != s_star.shape:
        raise ValidationError(f"shape mismatch: {tuple(s_onehot.shape)} vs {tuple(s_star.shape)}")
    return -(s_onehot * torch.log(s_star + LOG_EPS)).sum(dim=1).mean()


def stereo_loss(img_left, img_right, attn: ParallaxAttention, mask: ValidMask):
    """Masked L1 error of warping each image into the other view.

    Only visible (mask == 1) pixels are compared and only visible pixels are
    warped, so occluded content never reaches the loss. Both absolute-error
    terms are summed and divided by the number of valid entries over both
    terms; with no valid entries the loss is 0.
    """
    if img_left.shape != img_right.shape:
        raise ValidationError("left and right images differ in shape")
    o_l = mask.o_l2r.unsqueeze(1) > 0
    o_r = mask.o_r2l.unsqueeze(1) > 0
    # occluded pixels are dropped as warp sources too, so their content never
    # reaches the loss; where() rather than a product so inf * 0 cannot leak in
    src_l = torch.where(o_l, img_left, torch.zeros_like(img_left))
    src_r = torch.where(o_r, img_right, torch.zeros_like(img_right))
    warped_left = apply_attention(attn.m_r2l, src_r)
    warped_right = apply_attention(attn.m_l2r, src_l)
    err_l = torch.where(o_l, (img_left - warped_left).abs(), torch.zeros_like(img_left))
    err_r = torch.where(o_r, (img_right - warped_right).abs(), torch.zeros_like(img_right))
    channels = img_left.shape[1]
    count = (o_l.sum() + o_r.sum()) * channels
    return (err_l.sum() + err_r.sum()) / count.clamp_min(1.0)


def total_loss(l_sem, l_stereo, config: LossConfig = LossConfig()):
    """``l_sem + lambda * l_stereo``; ``l_stereo`` may be None when the term is ablated."""
    values = [l_sem] if l_stereo is None else [l_sem, l_stereo]
    for v in values:
        value = float(v.detach()) if torch.is_tensor(v) else float(v)
        if math.isnan(value) or math.isinf(value):
            raise ValidationError("loss terms must be finite")
    if l_stereo is None or config.lambda_stereo == 0:
        return l_sem
    return l_sem + config.lambda_stereo * l_stereo
