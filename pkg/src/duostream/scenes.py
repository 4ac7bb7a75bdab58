"""Synthetic multi-object scenes with ground-truth labels and saliency.

Each class is a (shape, colour) pair.  Objects sit on a faintly textured grey
background; one object per scene is rendered at full contrast and the rest at
reduced contrast.  Ground-truth saliency puts mass proportional to each
object's contrast around its centre.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .retina import area_weights, fixation_grid
from . import _kernels

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
COLOURS = (
    (0.90, 0.10, 0.10),
    (0.10, 0.75, 0.15),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.05),
    (0.98, 0.98, 0.98),
)
BACKGROUND = 0.5


@dataclass(frozen=True)
class SceneConfig:
    size: int = 96
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 4
    radius: tuple = (7.0, 10.0)
    low_contrast: tuple = (0.3, 0.55)
    texture: float = 0.04
    saliency_blur: float = 1.0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}]")
        if not 1 <= self.min_objects <= self.max_objects <= self.num_classes:
            raise ValueError("need 1 <= min_objects <= max_objects <= num_classes")


@dataclass
class SyntheticScene:
    image: np.ndarray        # (3, H, W) float32 in [0, 1]
    labels: np.ndarray       # (K,) multi-hot
    saliency_gt: np.ndarray  # (16, 16) probability map over the image grid
    density: np.ndarray      # (H, W) fine saliency density (sums to 1)
    centres: np.ndarray      # (n_objects, 2) normalised (x, y)
    contrasts: np.ndarray
    classes: np.ndarray
    seed: object = None


def _mask(shape, cx, cy, r, yy, xx):
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    if shape == "cross":
        w = 0.3 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "hbar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.35 * r)
    if shape == "vbar":
        return (np.abs(dy) <= r) & (np.abs(dx) <= 0.35 * r)
    raise ValueError(shape)


def _background(rng, size, amplitude):
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.full((size, size), BACKGROUND)
    for _ in range(3):
        fx, fy = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        bg += amplitude / 3 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    bg += rng.normal(0, amplitude / 2, size=(size, size))
    return np.repeat(bg[None], 3, axis=0)


def pool_density(density, n=16):
    """Sum a fine (H, W) density into an n x n grid."""
    H, W = density.shape
    return density.reshape(n, H // n, n, W // n).sum(axis=(1, 3))


def gen_synthetic_scene(seed, config=SceneConfig()):
    """Deterministic scene for ``seed`` (int or tuple of ints)."""
    rng = np.random.default_rng(seed)
    S = config.size
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes = rng.choice(config.num_classes, size=n_obj, replace=False)
    radii = rng.uniform(*config.radius, size=n_obj)
    centres = []
    for r in radii:
        for _ in range(1000):
            c = rng.uniform(r + 1, S - r - 1, size=2)
            if all(np.hypot(*(c - c2)) > r + r2 for c2, r2 in zip(centres, radii)):
                break
        else:
            raise RuntimeError("could not place objects without overlap")
        centres.append(c)
    centres = np.array(centres)
    contrasts = rng.uniform(*config.low_contrast, size=n_obj)
    contrasts[rng.integers(n_obj)] = 1.0

    img = _background(rng, S, config.texture)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    density = np.zeros((S, S))
    for k, c, r, con in zip(classes, centres, radii, contrasts):
        m = _mask(SHAPES[k], c[0], c[1], r, yy, xx)
        colour = np.array(COLOURS[k])[:, None]
        img[:, m] = BACKGROUND + con * (colour - BACKGROUND)
        blob = np.exp(-((xx - c[0]) ** 2 + (yy - c[1]) ** 2) / (2 * (r / 2) ** 2))
        density += con * blob / blob.sum()
    if config.saliency_blur > 0:
        density = gaussian_filter(density, config.saliency_blur, mode="constant")
    density /= density.sum()
    labels = np.zeros(config.num_classes, dtype=np.float32)
    labels[classes] = 1
    return SyntheticScene(
        image=np.clip(img, 0, 1).astype(np.float32),
        labels=labels,
        saliency_gt=pool_density(density),
        density=density.astype(np.float32),
        centres=centres / S,
        contrasts=contrasts,
        classes=classes,
        seed=seed,
    )


@dataclass
class SceneSet:
    images: np.ndarray    # (N, 3, H, W)
    labels: np.ndarray    # (N, K)
    density: np.ndarray   # (N, H, W)
    saliency: np.ndarray  # (N, 16, 16)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return SceneSet(self.images[idx], self.labels[idx], self.density[idx], self.saliency[idx])


def make_scene_set(n, seed, config=SceneConfig()):
    scenes = [gen_synthetic_scene((seed, i), config) for i in range(n)]
    return SceneSet(
        images=np.stack([s.image for s in scenes]),
        labels=np.stack([s.labels for s in scenes]),
        density=np.stack([s.density for s in scenes]),
        saliency=np.stack([s.saliency_gt for s in scenes]).astype(np.float32),
    )


def retinal_saliency_target(density, fixations, a, n_cells=16, grid=64):
    """Ground-truth saliency expressed over the retinal cells of each view.

    The fine density is sampled on the warped grid, weighted by the image area
    each retinal sample stands for, pooled to ``n_cells`` and renormalised.
    Views that see no mass get the uniform map.
    """
    N, H, W = density.shape
    py, px = fixation_grid(fixations, a, (H, W), grid)
    dens = _kernels.bilinear_gather(density[:, None].astype(np.float64), py, px)[:, 0]
    mass = dens.reshape(N, grid, grid) * area_weights(float(a), (H, W), grid)
    f = grid // n_cells
    mass = mass.reshape(N, n_cells, f, n_cells, f).sum(axis=(2, 4))
    total = mass.sum(axis=(1, 2), keepdims=True)
    out = np.where(total > 0, mass / np.where(total > 0, total, 1), 1.0 / n_cells ** 2)
    return out[:, None].astype(np.float32)
