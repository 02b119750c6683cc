"""Training loop, learning-rate schedule, stereo-consistent cropping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cluster import ClusterConfig, reconstruct_label, soft_cluster
from .core import StereoPair, ValidationError, validate_pair
from .losses import LossConfig, semantic_loss, stereo_loss, total_loss
from .model import (DEFAULT_ETA, Ablation, StereoSuperpixelNet, beta_scale, lab_tensor,
                    network_input, save_checkpoint)
from .synth import DatasetLayout

__all__ = ["TrainConfig", "lr_at", "beta_scale", "random_crop_pair", "train", "train_model"]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "l_sem", "l_stereo", "l_total", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 8
    total_iters: int = 20000
    lr0: float = 2e-4
    halve_every: int = 2000
    lr_floor_after: int = 8000
    lr_floor: float = 2e-5
    crop: tuple = (200, 200)
    eta: float = DEFAULT_ETA
    betas: tuple = (0.9, 0.999)
    n_spixels: int = 100
    n_iters: int = 5
    channels: int = 64
    ablation: Ablation = field(default_factory=Ablation)
    lambda_stereo: float = 1.0
    # the stereo loss compares Lab images scaled by this factor
    photometric_scale: float = 0.01
    scale_lab: bool = True
    grad_clip: float = 5.0
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        counts = (self.batch_size, self.total_iters, self.halve_every, self.lr_floor_after,
                  self.n_spixels, self.n_iters, self.channels) + tuple(self.crop)
        if min(counts) <= 0:
            raise ValueError("all counts in TrainConfig must be positive")
        if isinstance(self.ablation, str):
            self.ablation = Ablation.preset(self.ablation)
        elif isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)

    def to_dict(self):
        d = asdict(self)
        d["crop"] = list(self.crop)
        d["betas"] = list(self.betas)
        return d


def lr_at(iteration, config: TrainConfig = TrainConfig()):
    """Step schedule: halve every ``halve_every`` iterations, then a fixed floor."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if iteration >= config.lr_floor_after:
        return config.lr_floor
    return config.lr0 * 0.5 ** (iteration // config.halve_every)


def random_crop_pair(pair: StereoPair, size, seed=None, rng=None) -> StereoPair:
    """Crop left, right and label with one shared window."""
    ch, cw = size
    h, w = pair.left.shape[:2]
    if h < ch or w < cw:
        raise ValidationError(f"{pair.id or 'pair'}: image {h}x{w} smaller than crop {ch}x{cw}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    window = (slice(y0, y0 + ch), slice(x0, x0 + cw))
    label = pair.label[window] if pair.label is not None else None
    return StereoPair(pair.left[window], pair.right[window], label, pair.id)


def _batch(pairs: Sequence[StereoPair], crop, rng):
    h = min(min(p.left.shape[0] for p in pairs), crop[0])
    w = min(min(p.left.shape[1] for p in pairs), crop[1])
    crops = [random_crop_pair(p, (h, w), rng=rng) for p in pairs]
    left = lab_tensor(np.stack([c.left for c in crops]))
    right = lab_tensor(np.stack([c.right for c in crops]))
    labels = torch.from_numpy(np.stack([c.label for c in crops]).astype(np.int64))
    return left, right, labels


def one_hot_labels(labels):
    """B x H x W integer labels to a B x K x H x W one-hot float tensor."""
    _, inverse = torch.unique(labels, return_inverse=True)
    k = int(inverse.max()) + 1
    return F.one_hot(inverse, k).permute(0, 3, 1, 2).float()


def training_step(model, left, right, labels, config: TrainConfig):
    """Forward pass and loss terms for one batch; returns (l_sem, l_stereo, l_total)."""
    _, _, h, w = left.shape
    ccfg = ClusterConfig.from_count(config.n_spixels, h, w, n_iters=config.n_iters)
    beta = beta_scale(ccfg.grid, h, w, config.eta) if config.scale_lab else 1.0
    xy = config.ablation.xy_input
    x_l = network_input(left, beta, xy)
    x_r = network_input(right, beta, xy) if config.ablation.stereo_input else None
    out = model(x_l, x_r, views=("left",))
    assoc, _ = soft_cluster(out.left, ccfg)
    onehot = one_hot_labels(labels)
    l_sem = semantic_loss(onehot, reconstruct_label(assoc, onehot, ccfg.n_spixels))
    l_st = None
    if config.ablation.stereo_loss:
        s = config.photometric_scale
        l_st = stereo_loss(left * s, right * s, out.attn, out.mask)
    l_tot = total_loss(l_sem, l_st, LossConfig(config.lambda_stereo))
    return l_sem, l_st, l_tot


def train_model(pairs: List[StereoPair], config: TrainConfig, out_dir=None,
                model: Optional[StereoSuperpixelNet] = None, progress=None):
    """Train on in-memory labelled pairs; returns (model, history rows).

    With ``out_dir`` set, a CSV log ``train_log.csv`` and checkpoints
    ``ckpt_<iter>.pt`` / ``final.pt`` are written there.
    """
    if not pairs:
        raise ValidationError("no training samples")
    for p in pairs:
        validate_pair(p)
        if p.label is None:
            raise ValidationError(f"sample {p.id}: training needs a label map")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = StereoSuperpixelNet(channels=config.channels, ablation=config.ablation)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr0, betas=tuple(config.betas))
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)
    history = []
    start = time.time()
    try:
        for it in range(config.total_iters):
            lr = lr_at(it, config)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = rng.choice(len(pairs), size=config.batch_size,
                             replace=len(pairs) < config.batch_size)
            batch = [pairs[i] for i in idx]
            try:
                left, right, labels = _batch(batch, config.crop, rng)
            except (ValueError, TypeError) as exc:
                ids = ", ".join(p.id for p in batch)
                raise ValidationError(f"bad batch ({ids}): {exc}") from exc
            l_sem, l_st, l_tot = training_step(model, left, right, labels, config)
            opt.zero_grad(set_to_none=True)
            l_tot.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            row = (it, l_sem.item(), None if l_st is None else l_st.item(), l_tot.item(), lr)
            history.append(row)
            if writer is not None:
                writer.writerow(["" if v is None else v for v in row])
            if out_dir is not None and (it + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{it + 1:06d}.pt", model, iteration=it + 1)
            if progress is not None:
                progress(row)
            if it % 100 == 0:
                log.info("iter %d  l_total %.4f  lr %.2e  (%.0fs)", it, row[3], lr,
                         time.time() - start)
    finally:
        if writer is not None:
            log_fh.close()
    model.eval()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.pt", model, iteration=config.total_iters,
                        train_config=config.to_dict())
    return model, history


def train(dataset: DatasetLayout, config: TrainConfig, out_dir):
    """Train from a dataset layout on disk (train split)."""
    return train_model(dataset.load("train"), config, out_dir=out_dir)


def with_overrides(config: TrainConfig, **kwargs):
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
