"""Shared domain types, validation and colour conversion.

Image grids are row-major with the origin at the top-left corner; ``x`` is the
column index and ``y`` the row index. Arrays on the numpy side are ``H x W x C``;
tensors inside the network are ``B x C x H x W``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
# D65 white as the image of sRGB white, ~(0.95047, 1.0, 1.08883); exact so white -> L = 100
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0

FEATURE_DUMP_MAGIC = 0x46505353  # b"SSPF" read as little-endian uint32
_DUMP_HEADER = struct.Struct("<4I")

STAGES = ("extracted", "aligned", "fused", "embedded")


class ValidationError(ValueError):
    """Raised when an input violates a domain invariant."""


@dataclass
class StereoPair:
    """A rectified left/right pair in Lab space with an optional left-view label map."""

    left: np.ndarray
    right: np.ndarray
    label: Optional[np.ndarray] = None
    id: str = ""

    @property
    def shape(self):
        return self.left.shape[:2]


@dataclass
class FeatureMap:
    data: np.ndarray
    provenance: str = "extracted"

    def __post_init__(self):
        if self.provenance not in STAGES:
            raise ValidationError(f"unknown feature stage {self.provenance!r}")
        if self.data.ndim != 3:
            raise ValidationError("feature map must be H x W x C")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError(f"non-finite values in {self.provenance} features")


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    n_superpixels: int = field(default=-1)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValidationError("superpixel map must be H x W")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError("superpixel labels must be integers")
        if labels.size and labels.min() < 0:
            raise ValidationError("superpixel labels must be non-negative")
        if self.n_superpixels < 0:
            self.n_superpixels = int(labels.max()) + 1 if labels.size else 0
        elif labels.size and labels.max() >= self.n_superpixels:
            raise ValidationError("label exceeds n_superpixels")
        self.labels = labels

    def compact(self) -> "SuperpixelMap":
        """Relabel to 0..k-1 so that every id in range is non-empty."""
        _, inverse = np.unique(self.labels, return_inverse=True)
        labels = inverse.reshape(self.labels.shape).astype(np.int64)
        return SuperpixelMap(labels, int(labels.max()) + 1)


def rgb_to_lab(image):
    """Convert sRGB values in [0, 1] to CIE Lab (D65)."""
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValidationError("expected a trailing channel axis of size 3")
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValidationError("sRGB values must lie in [0, 1]")
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), (_LAB_KAPPA * xyz + 16.0) / 116.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab, clip=True):
    """Inverse of :func:`rgb_to_lab`."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f ** 3 > _LAB_EPS, f ** 3, (116.0 * f - 16.0) / _LAB_KAPPA)
    linear = (xyz * D65_WHITE) @ _XYZ_TO_RGB.T
    linear = np.clip(linear, 0.0, None)
    rgb = np.where(linear <= 0.0031308, 12.92 * linear,
                   1.055 * linear ** (1.0 / 2.4) - 0.055)
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


def validate_pair(pair: StereoPair) -> StereoPair:
    """Check the stereo pair invariants; returns the same object untouched."""
    left, right = np.asarray(pair.left), np.asarray(pair.right)
    if left.ndim != 3 or left.shape[-1] != 3:
        raise ValidationError(f"{pair.id or 'pair'}: left view must be H x W x 3")
    if left.shape != right.shape:
        raise ValidationError(
            f"{pair.id or 'pair'}: shape mismatch {left.shape} vs {right.shape}")
    for name, view in (("left", left), ("right", right)):
        if not np.all(np.isfinite(view)):
            raise ValidationError(f"{pair.id or 'pair'}: NaN/Inf in {name} view")
    if pair.label is not None:
        label = np.asarray(pair.label)
        if label.shape != left.shape[:2]:
            raise ValidationError(f"{pair.id or 'pair'}: label shape {label.shape} "
                                  f"does not match image {left.shape[:2]}")
        if label.size == 0:
            raise ValidationError(f"{pair.id or 'pair'}: empty label map")
        if np.issubdtype(label.dtype, np.floating) and not np.all(np.isfinite(label)):
            raise ValidationError(f"{pair.id or 'pair'}: NaN in label map")
    return pair


def read_rgb(path) -> np.ndarray:
    """Read an 8-bit image as float RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(path, rgb):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int64)


def write_label(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise ValidationError("label values must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def write_gray(path, values):
    """Write a float map in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_pair(left_path, right_path, label_path=None, id="") -> StereoPair:
    label = read_label(label_path) if label_path is not None else None
    pair = StereoPair(rgb_to_lab(read_rgb(left_path)), rgb_to_lab(read_rgb(right_path)),
                      label, id)
    return validate_pair(pair)


def write_feature_dump(path, features):
    """Write an H x W x C float map: 16-byte header then row-major float32."""
    data = np.ascontiguousarray(features.data if isinstance(features, FeatureMap)
                                else features, dtype="<f4")
    if data.ndim != 3:
        raise ValidationError("feature dump expects H x W x C")
    h, w, c = data.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(FEATURE_DUMP_MAGIC, h, w, c))
        fh.write(data.tobytes(order="C"))


def read_feature_dump(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, h, w, c = _DUMP_HEADER.unpack_from(raw)
    if magic != FEATURE_DUMP_MAGIC:
        raise ValidationError(f"{path}: bad feature dump magic {magic:#x}")
    body = np.frombuffer(raw, dtype="<f4", offset=_DUMP_HEADER.size)
    if body.size != h * w * c:
        raise ValidationError(f"{path}: truncated feature dump")
    return body.reshape(h, w, c).copy()
