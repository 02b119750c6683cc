"""Salient object detection on top of a superpixel map.

Background likelihood comes from boundary connectivity: regions that touch the
image border a lot relative to their size are probably background. Saliency is
the background-weighted colour contrast of each superpixel, damped by its own
background likelihood and min-max normalised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from .core import SuperpixelMap, ValidationError

SIGMA_CLR = 10.0
SIGMA_BND = 1.0
SPATIAL_FRACTION = 0.25
_MIN_EDGE = 1e-9  # csgraph treats zero weights as missing edges


@dataclass
class SuperpixelGraph:
    labels: np.ndarray      # H x W compact ids 0..n-1
    colors: np.ndarray      # n x 3 mean Lab
    sizes: np.ndarray       # n pixel counts
    centroids: np.ndarray   # n x 2 (row, col)
    edges: np.ndarray       # e x 2 adjacent pairs, i < j
    weights: np.ndarray     # e appearance distances
    bnd: frozenset

    @property
    def n_nodes(self):
        return len(self.sizes)


@dataclass
class SaliencyMap:
    s: np.ndarray

    def __post_init__(self):
        if self.s.size and (self.s.min() < 0 or self.s.max() > 1):
            raise ValidationError("saliency values must lie in [0, 1]")


def build_graph(labels, lab_image) -> SuperpixelGraph:
    labels = SuperpixelMap(np.asarray(labels).astype(np.int64)).compact().labels
    lab_image = np.asarray(lab_image, dtype=np.float64)
    if lab_image.shape[:2] != labels.shape:
        raise ValidationError("image and superpixel map differ in size")
    n = int(labels.max()) + 1
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n).astype(np.float64)
    colors = np.stack([np.bincount(flat, lab_image[..., c].ravel(), n) for c in range(3)],
                      axis=1) / sizes[:, None]
    ys, xs = np.indices(labels.shape)
    centroids = np.stack([np.bincount(flat, ys.ravel(), n), np.bincount(flat, xs.ravel(), n)],
                         axis=1) / sizes[:, None]
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    pairs = np.sort(np.concatenate(pairs), axis=1)
    edges = np.unique(pairs, axis=0) if len(pairs) else np.zeros((0, 2), dtype=np.int64)
    weights = np.linalg.norm(colors[edges[:, 0]] - colors[edges[:, 1]], axis=1)
    border = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    return SuperpixelGraph(labels, colors, sizes, centroids, edges, weights,
                           frozenset(np.unique(border).tolist()))


def boundary_connectivity(graph: SuperpixelGraph, region: Iterable[int]) -> float:
    """Border superpixels in ``region`` over the square root of its size."""
    region = set(region)
    if not region:
        raise ValidationError("region must be non-empty")
    return len(region & graph.bnd) / np.sqrt(len(region))


def geodesic_distances(graph: SuperpixelGraph):
    n = graph.n_nodes
    w = np.maximum(graph.weights, _MIN_EDGE)
    adj = coo_matrix((np.concatenate([w, w]),
                      (np.concatenate([graph.edges[:, 0], graph.edges[:, 1]]),
                       np.concatenate([graph.edges[:, 1], graph.edges[:, 0]]))),
                     shape=(n, n)).tocsr()
    return shortest_path(adj, method="D", directed=False)


def soft_regions(graph: SuperpixelGraph, sigma_clr=SIGMA_CLR):
    """Soft region masses per superpixel.

    Returns ``(area, border_length, bndcon)``: the region of ``p`` contains ``q``
    with weight ``exp(-d_geo(p, q)^2 / (2 sigma^2))``.
    """
    if sigma_clr <= 0:
        membership = np.eye(graph.n_nodes)
    else:
        d = geodesic_distances(graph)
        membership = np.exp(-(d ** 2) / (2 * sigma_clr ** 2))
    on_border = np.zeros(graph.n_nodes)
    on_border[list(graph.bnd)] = 1.0
    area = membership.sum(axis=1)
    length = membership @ on_border
    return area, length, length / np.sqrt(area)


def background_weight(bndcon, sigma_b=SIGMA_BND):
    return 1.0 - np.exp(-(np.asarray(bndcon) ** 2) / (2 * sigma_b ** 2))


def superpixel_saliency(graph: SuperpixelGraph, sigma_clr=SIGMA_CLR, sigma_b=SIGMA_BND,
                        sigma_spa=None):
    """Per-superpixel saliency in [0, 1] before scattering to pixels."""
    if sigma_spa is None:
        sigma_spa = SPATIAL_FRACTION * np.hypot(*graph.labels.shape)
    _, _, bndcon = soft_regions(graph, sigma_clr)
    w_bg = background_weight(bndcon, sigma_b)
    d_clr = np.linalg.norm(graph.colors[:, None, :] - graph.colors[None, :, :], axis=-1)
    d_spa = np.linalg.norm(graph.centroids[:, None, :] - graph.centroids[None, :, :], axis=-1)
    w_spa = np.exp(-(d_spa ** 2) / (2 * sigma_spa ** 2))
    contrast = (d_clr * w_spa) @ w_bg
    raw = (1.0 - w_bg) * contrast
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def saliency(graph: SuperpixelGraph, **kwargs) -> SaliencyMap:
    values = superpixel_saliency(graph, **kwargs)
    return SaliencyMap(values[graph.labels])


def saliency_from_superpixels(labels, lab_image, **kwargs) -> SaliencyMap:
    return saliency(build_graph(labels, lab_image), **kwargs)


def mae(pred, gt):
    """Mean absolute difference between a saliency map and a binary mask."""
    pred = pred.s if isinstance(pred, SaliencyMap) else np.asarray(pred, dtype=np.float64)
    gt = gt.s if isinstance(gt, SaliencyMap) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def run_sod(segment, samples, out_dir: Optional[Path] = None):
    """Saliency maps and MAE for ``samples`` (objects with id, left, right, gt).

    ``segment(sample)`` returns the superpixel map of the left view. Writes
    ``<id>.png`` maps and ``summary.csv`` when ``out_dir`` is given.
    """
    from .core import write_gray

    rows = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        sal = saliency_from_superpixels(segment(sample), sample.left)
        err = mae(sal, sample.gt)
        rows.append((sample.id, err))
        if out_dir is not None:
            write_gray(out_dir / f"{sample.id}.png", sal.s)
    if out_dir is not None:
        with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "mae"])
            writer.writerows((sid, repr(err)) for sid, err in rows)
    return rows
