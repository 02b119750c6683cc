"""Differentiable soft clustering of pixel embeddings on a regular grid.

Each pixel may only associate with the 3x3 block of grid cells around the
cell containing it. Candidate slots are ordered row-major over the block, so
slot order is also ascending superpixel-id order; slots that fall outside the
grid carry id ``-1`` and zero association.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
import torch
from scipy import ndimage

from .core import SuperpixelMap, ValidationError

MASS_EPS = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    grid: Tuple[int, int]  # (m_h, m_w)
    n_iters: int = 5
    candidate_radius: int = 1

    def __post_init__(self):
        if min(self.grid) < 1 or self.n_iters < 1:
            raise ValueError("grid dimensions and n_iters must be positive")
        if self.candidate_radius != 1:
            raise ValueError("only the 3x3 candidate neighbourhood is supported")

    @property
    def n_spixels(self):
        return self.grid[0] * self.grid[1]

    @classmethod
    def from_count(cls, n_spixels, height, width, n_iters=5):
        """Grid with roughly square cells whose cell count is close to ``n_spixels``.

        The realised count ``m_h * m_w`` can differ slightly from the request.
        """
        if n_spixels < 1:
            raise ValueError("n_spixels must be positive")
        if n_spixels > height * width:
            raise ValidationError(
                f"{n_spixels} superpixels requested for a {height}x{width} image")
        m_w = min(width, max(1, round(math.sqrt(n_spixels * width / height))))
        m_h = min(height, max(1, round(n_spixels / m_w)))
        return cls((m_h, m_w), n_iters=n_iters)


class AssociationMap(NamedTuple):
    q: torch.Tensor           # B x H x W x 9
    cell_index: torch.Tensor  # H x W x 9, int64, -1 for out-of-grid slots


def pixel_cells(height, width, grid):
    """Row and column of the grid cell containing each pixel."""
    m_h, m_w = grid
    if height < m_h or width < m_w:
        raise ValidationError(f"grid {m_h}x{m_w} larger than image {height}x{width}")
    rows = torch.arange(height) * m_h // height
    cols = torch.arange(width) * m_w // width
    return rows[:, None].expand(height, width), cols[None, :].expand(height, width)


def candidate_cells(height, width, grid):
    """H x W x 9 global ids of each pixel's candidate cells (-1 outside the grid)."""
    m_h, m_w = grid
    rows, cols = pixel_cells(height, width, grid)
    slots = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = rows + dr, cols + dc
            ok = (r >= 0) & (r < m_h) & (c >= 0) & (c < m_w)
            slots.append(torch.where(ok, r * m_w + c, torch.full_like(r, -1)))
    return torch.stack(slots, dim=-1)


def _dense(q_flat, index_flat, n_cells):
    """Scatter B x N x 9 associations into a dense B x N x m matrix."""
    b, n, _ = q_flat.shape
    valid = index_flat >= 0
    idx = index_flat.clamp_min(0).expand(b, n, 9)
    dense = q_flat.new_zeros(b, n, n_cells)
    return dense.scatter_add(2, idx, q_flat * valid)


def init_centers(features, config: ClusterConfig):
    """Mean embedding of every grid cell: B x m x C."""
    b, c, h, w = features.shape
    rows, cols = pixel_cells(h, w, config.grid)
    cell = (rows * config.grid[1] + cols).reshape(-1).to(features.device)
    flat = features.reshape(b, c, -1).transpose(1, 2)  # B x N x C
    one_hot = torch.nn.functional.one_hot(cell, config.n_spixels).to(features.dtype)
    sums = torch.einsum("nm,bnc->bmc", one_hot, flat)
    return sums / one_hot.sum(0)[None, :, None]


def _associate(flat, centers, index_flat):
    valid = index_flat >= 0
    sq_f = (flat ** 2).sum(-1, keepdim=True)              # B x N x 1
    sq_c = (centers ** 2).sum(-1)                         # B x m
    dist_all = (sq_f + sq_c[:, None, :] - 2 * flat @ centers.transpose(1, 2)).clamp_min(0)
    idx = index_flat.clamp_min(0).expand(flat.shape[0], -1, -1)
    dist = torch.gather(dist_all, 2, idx)
    logits = torch.where(valid, -dist, torch.full_like(dist, -math.inf))
    return torch.softmax(logits, dim=-1)


def iterate(features, centers, config: ClusterConfig, n_iters=None):
    """Alternate soft association and centre updates; returns (assoc, centers)."""
    b, c, h, w = features.shape
    cell_index = candidate_cells(h, w, config.grid).to(features.device)
    index_flat = cell_index.reshape(1, h * w, 9)
    flat = features.reshape(b, c, -1).transpose(1, 2)
    q = None
    for _ in range(n_iters or config.n_iters):
        q = _associate(flat, centers, index_flat)
        dense = _dense(q, index_flat, config.n_spixels)
        mass = dense.sum(1)                                # B x m
        updated = dense.transpose(1, 2) @ flat / mass.clamp_min(MASS_EPS)[..., None]
        centers = torch.where((mass < MASS_EPS)[..., None], centers, updated)
    return AssociationMap(q.reshape(b, h, w, 9), cell_index), centers


def soft_cluster(features, config: ClusterConfig, n_iters=None):
    centers = init_centers(features, config)
    return iterate(features, centers, config, n_iters)


def hard_assign(assoc: AssociationMap):
    """Argmax label per pixel, ties going to the smallest cell id. Returns B x H x W."""
    q, index = assoc.q, assoc.cell_index.expand_as(assoc.q)
    best = q.max(dim=-1, keepdim=True).values
    big = torch.iinfo(torch.int64).max
    ids = torch.where((q == best) & (index >= 0), index, torch.full_like(index, big))
    return ids.min(dim=-1).values


def reconstruct_label(assoc: AssociationMap, s_onehot, n_spixels):
    """Soft label reconstruction through the superpixels.

    ``s_onehot`` is B x K x H x W. Each superpixel gets the mass-normalised
    association-weighted mean of the pixel labels; those are scattered back to
    pixels through the same associations. Returns B x K x H x W.
    """
    b, h, w, _ = assoc.q.shape
    k = s_onehot.shape[1]
    if s_onehot.shape[0] != b or s_onehot.shape[-2:] != (h, w):
        raise ValidationError("label map does not match the association map")
    dense = _dense(assoc.q.reshape(b, h * w, 9), assoc.cell_index.reshape(1, h * w, 9),
                   n_spixels)
    flat = s_onehot.reshape(b, k, -1).transpose(1, 2)      # B x N x K
    mass = dense.sum(1).clamp_min(MASS_EPS)
    per_spixel = dense.transpose(1, 2) @ flat / mass[..., None]
    return (dense @ per_spixel).transpose(1, 2).reshape(b, k, h, w)


def enforce_connectivity(labels, min_size):
    """Split labels into 4-connected components and absorb the small ones.

    A component with fewer than ``min_size`` pixels joins the neighbouring
    component it shares the longest border with. Output labels are 0..k-1.
    """
    labels = np.asarray(labels)
    comps = np.zeros(labels.shape, dtype=np.int64)
    n = 0
    for value in np.unique(labels):
        lab, k = ndimage.label(labels == value)
        comps[lab > 0] = lab[lab > 0] + n
        n += k
    comps -= 1
    sizes = np.bincount(comps.ravel(), minlength=n)

    border = {}
    for a, b in ((comps[:, :-1], comps[:, 1:]), (comps[:-1, :], comps[1:, :])):
        diff = a != b
        pairs = np.stack([a[diff], b[diff]], axis=1)
        pairs.sort(axis=1)
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        for (u, v), cnt in zip(uniq.tolist(), counts.tolist()):
            border.setdefault(u, {})
            border.setdefault(v, {})
            border[u][v] = border[u].get(v, 0) + cnt
            border[v][u] = border[v].get(u, 0) + cnt

    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for comp in np.argsort(sizes, kind="stable").tolist():
        root = find(comp)
        if sizes[root] >= min_size or not border.get(root):
            continue
        target = min(border[root].items(), key=lambda kv: (-kv[1], kv[0]))[0]
        target = find(target)
        parent[root] = target
        sizes[target] += sizes[root]
        for nb, cnt in border.pop(root).items():
            nb = find(nb)
            if nb == target:
                border[target].pop(root, None)
                continue
            border[nb].pop(root, None)
            border[nb][target] = border[nb].get(target, 0) + cnt
            border[target][nb] = border[target].get(nb, 0) + cnt
        border[target].pop(root, None)

    roots = np.array([find(i) for i in range(n)])
    merged = roots[comps]
    return SuperpixelMap(merged).compact().labels
