"""The full stereo superpixel network, ablation presets, and checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .cluster import ClusterConfig, enforce_connectivity, hard_assign, soft_cluster
from .core import ValidationError
from .dsem import DSEM
from .dsfm import DEFAULT_TAU, DSFM, ParallaxAttention, ValidMask
from .extractor import ExtractorConfig, FeatureExtractor

CHECKPOINT_VERSION = 1
DEFAULT_ETA = 2.5


@dataclass(frozen=True)
class Ablation:
    """Component switches matching the columns of the ablation table.

    ``stereo_input`` selects stereo versus single-view input and ``xy_input``
    appends coordinate channels to the network input (the Stereo+XY row).
    """

    sfa: bool = True
    oh: bool = True
    se: bool = True
    df: bool = True
    stereo_loss: bool = True
    stereo_input: bool = True
    xy_input: bool = False

    def __post_init__(self):
        if self.oh and not self.sfa:
            raise ValueError("occlusion handling requires stereo feature alignment")
        if self.sfa != self.stereo_input:
            raise ValueError("stereo feature alignment is used exactly when the input is stereo")
        if self.stereo_loss and not self.sfa:
            raise ValueError("the stereo loss needs parallax attention")

    @classmethod
    def preset(cls, name):
        try:
            return ABLATION_PRESETS[name.upper()]
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from "
                             f"{', '.join(ABLATION_PRESETS)}") from None

    def to_dict(self):
        return asdict(self)


ABLATION_PRESETS = {
    "B0": Ablation(),
    "B1": Ablation(se=False, df=False),
    "B2": Ablation(se=False, df=False, xy_input=True),
    "B3": Ablation(df=False),
    "B4": Ablation(sfa=False, oh=False, stereo_loss=False, stereo_input=False),
    "B5": Ablation(oh=False),
    "B6": Ablation(stereo_loss=False),
}


def beta_scale(grid, height, width, eta=DEFAULT_ETA):
    """Input colour scaling ``eta * max(m_w / n_w, m_h / n_h)``."""
    m_h, m_w = grid
    if min(m_h, m_w, height, width) <= 0:
        raise ValueError("dimensions must be positive")
    return eta * max(m_w / width, m_h / height)


def network_input(lab, beta, xy_input=False):
    """Scale a B x 3 x H x W Lab tensor by ``beta`` and optionally append coordinates.

    Coordinates are in pixels times ``beta``, which puts them in units of grid
    cells times ``eta``.
    """
    x = lab * beta
    if xy_input:
        b, _, h, w = lab.shape
        ys = torch.arange(h, dtype=lab.dtype, device=lab.device)[:, None].expand(h, w)
        xs = torch.arange(w, dtype=lab.dtype, device=lab.device)[None, :].expand(h, w)
        xy = torch.stack([xs, ys]).expand(b, 2, h, w) * beta
        x = torch.cat([x, xy], dim=1)
    return x


class NetOutput(NamedTuple):
    left: Optional[torch.Tensor]
    right: Optional[torch.Tensor]
    attn: Optional[ParallaxAttention]
    mask: Optional[ValidMask]


class StereoSuperpixelNet(nn.Module):
    """Extractor, optional stereo fusion, and spatial embedding producing per-pixel embeddings."""

    def __init__(self, channels=64, ablation: Ablation = Ablation(), tau=DEFAULT_TAU,
                 shared_projection=True, extractor: Optional[ExtractorConfig] = None):
        super().__init__()
        if extractor is None:
            extractor = ExtractorConfig(in_channels=5 if ablation.xy_input else 3,
                                        channels=channels, out_channels=channels)
        self.ablation = ablation
        self.tau = tau
        self.shared_projection = shared_projection
        self.extractor = FeatureExtractor(extractor)
        c = extractor.out_channels
        self.dsfm = (DSFM(c, tau=tau, shared_projection=shared_projection,
                          occlusion=ablation.oh) if ablation.sfa else None)
        self.dsem = DSEM(c, embed=ablation.se, dynamic=ablation.df)

    @property
    def channels(self):
        return self.extractor.config.out_channels

    def forward(self, left, right=None, views=("left", "right")):
        if self.dsfm is None:
            f_left = self.dsem(self.extractor(left)) if "left" in views else None
            f_right = (self.dsem(self.extractor(right))
                       if right is not None and "right" in views else None)
            return NetOutput(f_left, f_right, None, None)
        if right is None:
            raise ValidationError("this configuration needs a right view")
        f_left, f_right = self.extractor.extract_pair(left, right)
        fused_l, fused_r, attn, mask = self.dsfm(f_left, f_right, views=views)
        out_l = self.dsem(fused_l) if fused_l is not None else None
        out_r = self.dsem(fused_r) if fused_r is not None else None
        return NetOutput(out_l, out_r, attn, mask)

    def config_dict(self):
        return {
            "extractor": self.extractor.config.to_dict(),
            "ablation": self.ablation.to_dict(),
            "tau": self.tau,
            "shared_projection": self.shared_projection,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(ablation=Ablation(**cfg["ablation"]), tau=cfg["tau"],
                   shared_projection=cfg["shared_projection"],
                   extractor=ExtractorConfig.from_dict(cfg["extractor"]))


def save_checkpoint(path, model: StereoSuperpixelNet, **extra):
    torch.save({"version": CHECKPOINT_VERSION, "config": model.config_dict(),
                "state_dict": model.state_dict(), "extra": extra}, path)


def load_checkpoint(path, map_location="cpu"):
    """Rebuild a model from a checkpoint; returns (model, extra) in eval mode."""
    blob = torch.load(path, map_location=map_location, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = StereoSuperpixelNet.from_config(blob["config"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})


def lab_tensor(lab):
    """H x W x 3 (or N x H x W x 3) numpy Lab to a float32 B x 3 x H x W tensor."""
    arr = np.asarray(lab, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def segment_pair(model: StereoSuperpixelNet, left, right, n_spixels, n_iters=10,
                 eta=DEFAULT_ETA, scale_lab=True, connectivity=False, views=("left",)):
    """Superpixel label maps (numpy, H x W) for the requested views of one pair."""
    model.eval()
    h, w = left.shape[:2]
    ccfg = ClusterConfig.from_count(n_spixels, h, w, n_iters=n_iters)
    beta = beta_scale(ccfg.grid, h, w, eta) if scale_lab else 1.0
    xy = model.ablation.xy_input
    x_l = network_input(lab_tensor(left), beta, xy)
    x_r = network_input(lab_tensor(right), beta, xy) if right is not None else None
    if model.dsfm is None and "right" in views and x_r is None:
        raise ValidationError("right view requested but not supplied")
    out = model(x_l, x_r, views=views)
    result = {}
    for view, feats in (("left", out.left), ("right", out.right)):
        if view not in views or feats is None:
            continue
        assoc, _ = soft_cluster(feats, ccfg)
        labels = hard_assign(assoc)[0].cpu().numpy()
        if connectivity:
            labels = enforce_connectivity(labels, max(1, (h * w // ccfg.n_spixels) // 4))
        result[view] = labels
    return result

