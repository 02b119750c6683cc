"""Superpixel quality metrics and the metric-vs-count benchmark harness."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import ValidationError

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "n_spixels", "asa", "ue", "br", "n_images")


def _check(s, g):
    s, g = np.asarray(s), np.asarray(g)
    if s.shape != g.shape:
        raise ValidationError(f"shape mismatch: {s.shape} vs {g.shape}")
    if g.size == 0:
        raise ValidationError("empty ground truth")
    return s, g


def contingency(s, g):
    """Overlap counts ``|S_i ∩ G_j|`` over the labels present in each map."""
    _, s_idx = np.unique(s, return_inverse=True)
    _, g_idx = np.unique(g, return_inverse=True)
    s_idx, g_idx = s_idx.ravel(), g_idx.ravel()
    n_s, n_g = s_idx.max() + 1, g_idx.max() + 1
    return np.bincount(s_idx * n_g + g_idx, minlength=n_s * n_g).reshape(n_s, n_g)


def asa(s, g):
    """Achievable segmentation accuracy."""
    s, g = _check(s, g)
    table = contingency(s, g)
    return float(table.max(axis=1).sum() / g.size)


def ue(s, g, normalize="segments"):
    """Undersegmentation error.

    ``normalize="segments"`` averages the size-normalised leakage over ground
    truth segments; ``"pixels"`` sums the raw leakage and divides by the pixel
    count.
    """
    s, g = _check(s, g)
    table = contingency(s, g)
    s_sizes = table.sum(axis=1)
    g_sizes = table.sum(axis=0)
    covering = (table > 0).T @ s_sizes  # per G_j: total size of touching superpixels
    leak = covering - g_sizes
    if normalize == "segments":
        return float(np.mean(leak / g_sizes))
    if normalize == "pixels":
        return float(leak.sum() / g.size)
    raise ValueError(f"unknown normalization {normalize!r}")


def boundary_map(labels):
    """Pixels with a 4-neighbour carrying a different label."""
    labels = np.asarray(labels)
    b = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    b[:, 1:] |= dx
    b[:, :-1] |= dx
    b[1:, :] |= dy
    b[:-1, :] |= dy
    return b


def default_tolerance(height, width):
    return max(1, round(0.0025 * math.hypot(height, width)))


def br(s, g, r=None):
    """Boundary recall with Chebyshev tolerance ``r`` (pixels)."""
    s, g = _check(s, g)
    if r is None:
        r = default_tolerance(*g.shape)
    if r < 0:
        raise ValueError("r must be non-negative")
    gb = boundary_map(g)
    n_gt = gb.sum()
    if n_gt == 0:
        return 1.0
    sb = boundary_map(s)
    if r > 0:
        sb = ndimage.maximum_filter(sb.astype(np.uint8), size=2 * r + 1,
                                    mode="constant", cval=0).astype(bool)
    return float((gb & sb).sum() / n_gt)


@dataclass
class BenchmarkResult:
    method: str
    rows: Dict[int, Dict[str, float]] = field(default_factory=dict)
    per_image: Dict[int, List[Tuple[str, float, float, float]]] = field(default_factory=dict)

    def to_csv(self, path):
        write_results_csv(path, [self])


def write_results_csv(path, results: Iterable[BenchmarkResult]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for res in results:
            for n in sorted(res.rows):
                row = res.rows[n]
                writer.writerow([res.method, n, repr(row["asa"]), repr(row["ue"]),
                                 repr(row["br"]), row["n_images"]])


def read_results_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"method": r["method"], "n_spixels": int(r["n_spixels"]),
                 "asa": float(r["asa"]), "ue": float(r["ue"]), "br": float(r["br"]),
                 "n_images": int(r["n_images"])} for r in csv.DictReader(fh)]


def benchmark(method: Callable, samples: Sequence, spixel_counts: Sequence[int],
              name="method", r=None, out_csv=None, plot_dir=None,
              ue_normalize="segments") -> BenchmarkResult:
    """Average ASA/UE/BR over ``samples`` for each superpixel count.

    ``method(sample, n)`` returns a label map or None (missing prediction);
    ``samples`` are objects with ``id`` and ``label`` attributes. Missing
    predictions are skipped with a warning. Means are accumulated in sample
    order so results are reproducible.
    """
    result = BenchmarkResult(name)
    for n in spixel_counts:
        per = []
        for sample in samples:
            pred = method(sample, n)
            if pred is None:
                warnings.warn(f"{name}: no prediction for sample {sample.id} at n={n}; skipped")
                continue
            g = sample.label
            per.append((sample.id, asa(pred, g), ue(pred, g, ue_normalize), br(pred, g, r)))
        result.per_image[n] = per
        if per:
            arr = np.array([p[1:] for p in per], dtype=np.float64)
            means = arr.mean(axis=0)
        else:
            means = [math.nan] * 3
        result.rows[n] = {"asa": float(means[0]), "ue": float(means[1]),
                          "br": float(means[2]), "n_images": len(per)}
    if out_csv is not None:
        result.to_csv(out_csv)
    if plot_dir is not None:
        plot_results([result], plot_dir)
    return result


def plot_results(results, out_dir):
    """One line plot per metric (ASA, UE, BR) against superpixel count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for res in results:
        if isinstance(res, BenchmarkResult):
            rows += [{"method": res.method, "n_spixels": n, **v} for n, v in res.rows.items()]
        else:
            rows.append(res)
    paths = []
    for metric in ("asa", "ue", "br"):
        fig, ax = plt.subplots(figsize=(4, 3))
        for method in sorted({r["method"] for r in rows}):
            pts = sorted((r["n_spixels"], r[metric]) for r in rows if r["method"] == method)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        ax.set_xlabel("number of superpixels")
        ax.set_ylabel(metric.upper())
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
