"""Supervision targets built from head-point annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TEMPLATE_SIZE = 15
NUM_CLASSES = 15
DEFAULT_SIGMA = 4.0


@dataclass
class AnnotationSet:
    """Head centres as (x=column, y=row) in pixels, plus the image size."""

    points: np.ndarray
    height: int
    width: int
    tags: list[str] | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"image dims must be positive, got {self.height}x{self.width}")
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= self.width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.height)
        if bad.any():
            raise ValueError(
                f"{int(bad.sum())} point(s) outside {self.width}x{self.height} image, "
                f"first: {tuple(pts[bad][0])}"
            )
        if self.tags is not None and len(self.tags) != len(pts):
            raise ValueError(f"{len(self.tags)} tags for {len(pts)} points")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    values: np.ndarray
    stride: int = 1

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class SegPyramid:
    """Binary maps at strides 2, 4 and 8."""

    levels: list[np.ndarray]


@dataclass
class ClassLabelSpec:
    K: int
    thr: float
    C: float


@dataclass
class GroundTruthBundle:
    density: DensityMap
    density_s8: DensityMap
    pyramid: SegPyramid
    label: int
    count: int
    tags: list[str] | None = field(default=None)


def encode_density(ann: AnnotationSet, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Sum of per-head Gaussians, each truncated at ceil(4 sigma) and clipped to
    the image, then renormalised so every head contributes exactly 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = ann.height, ann.width
    out = np.zeros((h, w))
    r = int(math.ceil(4 * sigma))
    for x, y in ann.points:
        cx, cy = int(round(x)), int(round(y))
        r0, r1 = max(cy - r, 0), min(cy + r + 1, h)
        c0, c1 = max(cx - r, 0), min(cx + r + 1, w)
        gy = np.exp(-((np.arange(r0, r1) - y) ** 2) / (2 * sigma ** 2))
        gx = np.exp(-((np.arange(c0, c1) - x) ** 2) / (2 * sigma ** 2))
        k = np.outer(gy, gx)
        out[r0:r1, c0:c1] += k / k.sum()
    return DensityMap(out, 1)


def encode_segmentation(ann: AnnotationSet) -> np.ndarray:
    """Paste a 15x15 block of ones on each rounded head position."""
    s = np.zeros((ann.height, ann.width), dtype=np.uint8)
    half = TEMPLATE_SIZE // 2
    for x, y in ann.points:
        cx, cy = int(round(x)), int(round(y))
        s[max(cy - half, 0):cy + half + 1, max(cx - half, 0):cx + half + 1] = 1
    return s


def _reduce_any(s: np.ndarray) -> np.ndarray:
    h, w = s.shape
    if h % 2 or w % 2:
        s = np.pad(s, ((0, h % 2), (0, w % 2)))
    h, w = s.shape
    return (s.reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3)) > 0).astype(np.uint8)


def build_seg_pyramid(s0: np.ndarray) -> SegPyramid:
    levels = []
    cur = (np.asarray(s0) > 0).astype(np.uint8)
    for _ in range(3):
        cur = _reduce_any(cur)
        levels.append(cur)
    return SegPyramid(levels)


def downsample_density(d: DensityMap, factor: int = 8) -> DensityMap:
    """Sum-pool over factor x factor blocks (zero-padding ragged edges)."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    v = d.values
    h, w = v.shape
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        v = np.pad(v, ((0, ph), (0, pw)))
    h, w = v.shape
    out = v.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(out, d.stride * factor)


def compute_thr(counts, K: int = NUM_CLASSES) -> ClassLabelSpec:
    counts = list(counts)
    if not counts:
        raise ValueError("compute_thr needs at least one count")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    c = float(max(counts))
    # an all-empty dataset has no scale; fall back to unit-width classes
    thr = c / K if c > 0 else 1.0
    return ClassLabelSpec(K, thr, c)


def encode_class_label(count: float, spec: ClassLabelSpec) -> int:
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    return min(int(math.floor(count / spec.thr)), spec.K - 1)


def make_bundle(ann: AnnotationSet, sigma: float, spec: ClassLabelSpec) -> GroundTruthBundle:
    dens = encode_density(ann, sigma)
    return GroundTruthBundle(
        density=dens,
        density_s8=downsample_density(dens, 8),
        pyramid=build_seg_pyramid(encode_segmentation(ann)),
        label=encode_class_label(len(ann), spec),
        count=len(ann),
        tags=ann.tags,
    )
