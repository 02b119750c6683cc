"""Synthetic stereo scenes with known disparity, occlusion and labels.

Scenes are textured backgrounds at zero disparity with coloured shapes in
front. Each shape has an integer disparity ``d``: a surface point seen at
column ``x`` in the left view appears at ``x - d`` in the right view. Shapes
with larger disparity are nearer and painted later.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

from .core import ValidationError, load_pair, read_label, write_label, write_rgb


@dataclass
class DatasetLayout:
    """``root/{left,right,labels}/<id>.png`` plus ``train.txt``/``val.txt`` manifests."""

    root: Path
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    label_dir: str = "labels"

    @classmethod
    def open(cls, root, label_dir="labels"):
        root = Path(root)
        splits = {}
        for split in ("train", "val"):
            manifest = root / f"{split}.txt"
            splits[split] = ([ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
                             if manifest.exists() else [])
        if not splits["train"] and not splits["val"]:
            ids = sorted(p.stem for p in (root / "left").glob("*.png"))
            splits["val"] = ids
        layout = cls(root, splits["train"], splits["val"], label_dir)
        layout.check()
        return layout

    def paths(self, sample_id):
        return (self.root / "left" / f"{sample_id}.png",
                self.root / "right" / f"{sample_id}.png",
                self.root / self.label_dir / f"{sample_id}.png")

    def check(self):
        for split in ("train", "val"):
            for sid in getattr(self, split):
                left, right, label = self.paths(sid)
                missing = [p for p in (left, right) if not p.exists()]
                if split == "train" and not label.exists():
                    missing.append(label)
                if missing:
                    raise ValidationError(f"sample {sid}: missing {', '.join(map(str, missing))}")

    def load(self, split="train"):
        pairs = []
        for sid in getattr(self, split):
            left, right, label = self.paths(sid)
            try:
                pairs.append(load_pair(left, right, label if label.exists() else None, id=sid))
            except (OSError, ValueError) as exc:
                raise ValidationError(f"sample {sid}: {exc}") from exc
        return pairs

    def write_manifests(self):
        (self.root / "train.txt").write_text("".join(f"{s}\n" for s in self.train))
        (self.root / "val.txt").write_text("".join(f"{s}\n" for s in self.val))


def _texture(rng, shape, base_rgb, amplitude):
    """Base colour plus a smooth gradient and mild per-pixel noise."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    grad = rng.uniform(-1, 1, size=(2, 3)) * amplitude
    tex = (base_rgb[None, None, :]
           + grad[0] * (ys / max(h - 1, 1))[..., None]
           + grad[1] * (xs / max(w - 1, 1))[..., None]
           + rng.normal(0, amplitude / 3, size=(h, w, 3)))
    return np.clip(tex, 0.0, 1.0)


def _shape_mask(rng, kind, h, w, anchor_border=False):
    """Boolean mask over an H x W surface canvas for one random shape.

    ``anchor_border`` puts the centre on a band along a random image side so the
    shape is cut by the border, like background structure in a photograph.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
    if anchor_border:
        edge = rng.uniform(-0.05, 0.05)
        side = int(rng.integers(4))
        if side < 2:
            cy = (edge if side == 0 else 1 - edge) * h
        else:
            cx = (edge if side == 2 else 1 - edge) * w
    ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
    if kind == "ellipse":
        return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    if kind == "rect":
        return (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    # triangle: intersection of three half-planes around the centre
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
    pts = np.stack([cy + ry * np.sin(angles), cx + rx * np.cos(angles)], axis=1)
    inside = np.ones((h, w), dtype=bool)
    for i in range(3):
        (y0, x0), (y1, x1) = pts[i], pts[(i + 1) % 3]
        (y2, x2) = pts[(i + 2) % 3]
        side = lambda y, x: (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        inside &= np.sign(side(ys, xs)) == np.sign(side(y2, x2))
    return inside


def render_scene(rng, height, width, max_disparity, n_shapes=None, centered_object=False):
    """Render one stereo scene.

    Returns a dict with ``left``/``right`` RGB in [0, 1], ``label`` (0 = background,
    k = shape k, left view), ``disparity`` and ``occlusion`` (left view, 1 where
    the left pixel is not visible in the right view), and ``salient`` (the
    centred object's mask when ``centered_object`` is set). With a centred
    object the other shapes are anchored to the image border.
    """
    pad = max_disparity
    cw = width + pad  # surface canvas; right view reads columns x + d
    background = _texture(rng, (height, cw), rng.uniform(0.2, 0.8, 3), 0.15)
    if n_shapes is None:
        # salient-object scenes keep the clutter sparse: one dominant object
        n_shapes = int(rng.integers(0, 3) if centered_object else rng.integers(3, 7))
    shapes = []
    for _ in range(n_shapes):
        kind = rng.choice(["ellipse", "rect", "triangle"])
        mask = _shape_mask(rng, kind, height, cw, anchor_border=centered_object)
        tex = _texture(rng, (height, cw), rng.uniform(0.05, 0.95, 3), 0.1)
        d = int(rng.integers(0, max_disparity + 1)) if max_disparity > 0 else 0
        shapes.append({"depth": d, "d": d, "mask": mask, "tex": tex})
    if centered_object:
        ys, xs = np.mgrid[0:height, 0:cw].astype(np.float64)
        ry, rx = rng.uniform(0.18, 0.3) * height, rng.uniform(0.18, 0.3) * width
        cy = height / 2 + rng.uniform(-0.05, 0.05) * height
        cx = width / 2 + rng.uniform(-0.05, 0.05) * width
        mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        tex = _texture(rng, (height, cw), rng.uniform(0.05, 0.95, 3), 0.1)
        d = int(rng.integers(1, max_disparity + 1)) if max_disparity > 0 else 0
        # always painted on top
        shapes.append({"depth": max_disparity + 1, "d": d, "mask": mask, "tex": tex})
    # painter's order: far first; stable sort keeps creation order on ties
    order = sorted(range(len(shapes)), key=lambda k: shapes[k]["depth"])

    def view(offset_sign):
        img = np.empty((height, width, 3))
        surf = np.zeros((height, width), dtype=np.int64)
        disp = np.zeros((height, width), dtype=np.int64)
        cols = np.arange(width)
        img[:] = background[:, cols]
        for k in order:
            shape = shapes[k]
            src = cols + offset_sign * shape["d"]
            mask = shape["mask"][:, src]
            img[mask] = shape["tex"][:, src][mask]
            surf[mask] = k + 1
            disp[mask] = shape["d"]
        return img, surf, disp

    left, surf_l, disp_l = view(0)
    right, surf_r, _ = view(1)
    ys, xs = np.mgrid[0:height, 0:width]
    xr = xs - disp_l
    visible = xr >= 0
    occlusion = np.ones((height, width), dtype=np.uint8)
    occlusion[visible] = (surf_r[ys[visible], xr[visible]] != surf_l[visible]).astype(np.uint8)
    salient = (surf_l == len(shapes)) if centered_object else np.zeros_like(surf_l, bool)
    return {"left": left, "right": right, "label": surf_l, "disparity": disp_l,
            "occlusion": occlusion, "salient": salient}


def make_synthetic(out, n, height=64, width=64, max_disparity=8, seed=0, val_fraction=0.25,
                   centered_object=False):
    """Write ``n`` synthetic stereo scenes under ``out`` and return their layout."""
    if max_disparity < 0 or max_disparity >= width / 4:
        raise ValidationError("max_disparity must be in [0, width / 4)")
    root = Path(out)
    for sub in ("left", "right", "labels", "disparity", "occlusion"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if centered_object:
        (root / "gt").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = [f"{i:06d}" for i in range(n)]
    for sid in ids:
        scene = render_scene(rng, height, width, max_disparity, centered_object=centered_object)
        write_rgb(root / "left" / f"{sid}.png", scene["left"])
        write_rgb(root / "right" / f"{sid}.png", scene["right"])
        write_label(root / "labels" / f"{sid}.png", scene["label"])
        # KITTI convention: 16-bit disparity times 256
        write_label(root / "disparity" / f"{sid}.png", scene["disparity"] * 256)
        Image.fromarray(scene["occlusion"] * 255).save(root / "occlusion" / f"{sid}.png")
        if centered_object:
            Image.fromarray(scene["salient"].astype(np.uint8) * 255).save(root / "gt" / f"{sid}.png")
    n_val = int(round(n * val_fraction))
    layout = DatasetLayout(root, ids[: n - n_val], ids[n - n_val:])
    layout.write_manifests()
    return layout


def read_disparity(path):
    return read_label(path) / 256.0
