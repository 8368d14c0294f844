"""Synthetic 4-class shapes dataset (circle, square, triangle, cross).

Each image is drawn from its own keyed generator, so image ``i`` of a split
does not depend on how many images precede it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..rng import generator

CLASSES = ("circle", "square", "triangle", "cross")

SUPERSAMPLE = 4
# background never exceeds BG_MAX, fills never go below FILL_MIN
BG_MAX = 0.38
FILL_MIN = 0.6
MARGIN = FILL_MIN - BG_MAX
SPEC_KEYS = {"n_train_per_class", "n_val_per_class", "size", "noise", "seed"}


@dataclass
class ShapesDataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str
    seed: int
    noise: float

    def __len__(self):
        return len(self.labels)

    def spec(self) -> dict:
        n, c, h, w = self.images.shape
        return dict(split=self.split, seed=self.seed, noise=self.noise,
                    n_per_class=n // len(CLASSES), size=h)


def _inside(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "square":
        s = 0.8 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        ok = np.ones(u.shape, dtype=bool)
        for phi in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6):
            ok &= u * np.cos(phi) + v * np.sin(phi) <= 0.5 * r
        return ok
    if kind == "cross":
        w = 0.3 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def coverage(kind: str, size: int, cx: float, cy: float, r: float, theta: float) -> np.ndarray:
    """Anti-aliased fractional pixel coverage of one shape, ``(size, size)``."""
    ss = SUPERSAMPLE
    t = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(t, t, indexing="ij")
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    hit = _inside(kind, u, v, r).astype(np.float64)
    return hit.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render(label: int, size: int, noise: float, rng: np.random.Generator):
    """One image and its coverage mask."""
    cx, cy = rng.uniform(0.35, 0.65, size=2) * size
    r = rng.uniform(0.22, 0.34) * size
    theta = rng.uniform(0, 2 * np.pi)
    cov = coverage(CLASSES[label], size, cx, cy, r, theta)

    base = rng.uniform(0.05, 0.28, size=3)
    freq = rng.uniform(1.0, 4.0)
    ang = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(size) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    texture = 0.05 * (1 + np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase))
    bg = base[:, None, None] + texture[None]
    fill = rng.uniform(FILL_MIN, 0.95, size=3)[:, None, None]
    img = bg * (1 - cov) + fill * cov
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), cov


def gen_shapes(n_per_class: int, size: int = 32, noise: float = 0.05, seed: int = 0,
               split: str = "train") -> ShapesDataset:
    """Balanced, shuffled dataset; identical bytes for identical arguments."""
    labels = np.repeat(np.arange(len(CLASSES)), n_per_class)
    order = generator(seed, "shapes", split, "order").permutation(len(labels))
    labels = labels[order]
    images = np.empty((len(labels), 3, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        img, _ = render(int(lab), size, noise, generator(seed, "shapes", split, i))
        images[i] = img
    return ShapesDataset(images, labels.astype(np.int64), split, seed, noise)


def make_split(spec: dict, split: str) -> ShapesDataset:
    """One split (``"train"`` or ``"val"``) of a dataset spec dict."""
    unknown = set(spec) - SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    n = spec.get("n_train_per_class", 500) if split == "train" else spec.get("n_val_per_class", 125)
    return gen_shapes(n, size=spec.get("size", 32), noise=spec.get("noise", 0.05),
                      seed=spec.get("seed", 0), split=split)


def train_val(spec: dict) -> tuple[ShapesDataset, ShapesDataset]:
    """Train and validation splits from a dataset spec dict."""
    return make_split(spec, "train"), make_split(spec, "val")
