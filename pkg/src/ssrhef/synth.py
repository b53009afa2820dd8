"""Synthetic crowd scenes with bright, easy heads and small faint, hard ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .groundtruth import AnnotationSet

MIN_SEPARATION = 8.0
MAX_REJECTIONS = 1000


@dataclass
class SynthConfig:
    image_size: int = 64
    n_easy: int = 8
    n_hard: int = 7
    easy_radius: float = 6.0
    hard_radius: float = 2.0
    easy_contrast: float = 0.6
    hard_contrast: float = 0.12
    background_level: float = 0.2
    background_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_easy < 0 or self.n_hard < 0:
            raise ValueError("head counts must be non-negative")
        if self.easy_contrast < 0.5 or not 0 < self.hard_contrast <= 0.15:
            raise ValueError("easy contrast must be >= 0.5 and hard contrast in (0, 0.15]")
        top = self.background_level + self.background_amplitude + max(self.easy_contrast, self.hard_contrast)
        if self.background_level - self.background_amplitude < 0 or top > 1:
            raise ValueError("background and contrast settings push pixels outside [0, 1]")


def _background(cfg: SynthConfig, rng) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    tex = np.zeros((n, n))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    tex /= 3.0
    return cfg.background_level + cfg.background_amplitude * tex


def _place(n_heads: int, size: int, rng) -> np.ndarray:
    pts: list[tuple[float, float]] = []
    for _ in range(n_heads):
        for _attempt in range(MAX_REJECTIONS):
            p = rng.uniform(0, size, size=2)
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= MIN_SEPARATION ** 2 for q in pts):
                pts.append((float(p[0]), float(p[1])))
                break
        else:
            raise ValueError(
                f"could not place head {len(pts) + 1} of {n_heads} after {MAX_REJECTIONS} tries; "
                "use fewer heads or a larger image"
            )
    return np.array(pts).reshape(-1, 2)


def synth_scene(cfg: SynthConfig):
    """Return ``(image, annotations)``; annotation tags are "easy" or "hard"."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.image_size
    bg = _background(cfg, rng)
    total = cfg.n_easy + cfg.n_hard
    pts = _place(total, n, rng)
    tags = ["easy"] * cfg.n_easy + ["hard"] * cfg.n_hard
    order = rng.permutation(total)
    pts, tags = pts[order], [tags[i] for i in order]

    yy, xx = np.mgrid[0:n, 0:n]
    blobs = np.zeros((n, n))
    for (x, y), tag in zip(pts, tags):
        radius, contrast = (
            (cfg.easy_radius, cfg.easy_contrast) if tag == "easy" else (cfg.hard_radius, cfg.hard_contrast)
        )
        r = np.hypot(xx - x, yy - y)
        bump = np.where(r < radius, 0.5 * (1 + np.cos(np.pi * r / radius)), 0.0)
        blobs = np.maximum(blobs, contrast * bump)
    image = np.clip(bg + blobs, 0.0, 1.0)
    return image, AnnotationSet(pts, n, n, tags)


def synth_dataset(n_images: int, base: SynthConfig):
    """``n_images`` scenes with seeds ``base.seed, base.seed + 1, ...``."""
    out = []
    for i in range(n_images):
        cfg = SynthConfig(**{**base.__dict__, "seed": base.seed + i})
        out.append(synth_scene(cfg))
    return out
