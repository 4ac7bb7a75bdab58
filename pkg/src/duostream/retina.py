"""Foveated retinal sampling.

A uniform square grid of retinal coordinates is warped radially around the
fixation: a retinal radius r' in [0, 1] lands at image radius
``r_max * g(r')`` along the same polar angle, with

    g(r') = (1 - a**(r'/2)) / (1 - a**(1/2))

which is the centre-concentrating warp normalised so that g(1) = 1.  Larger
``a`` packs more samples near the fixation.
"""
import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

WHERE_A = 2.5
WHAT_A = 15.0


class RetinaParamError(ValueError):
    pass


@dataclass(frozen=True)
class RetinalParams:
    a: float
    grid: int = 64
    fixation: tuple = (0.5, 0.5)

    def __post_init__(self):
        if not self.a > 1:
            raise RetinaParamError(f"concentration a must exceed 1, got {self.a}")
        if self.grid < 2:
            raise RetinaParamError("grid must be at least 2")

    @property
    def b(self):
        """Normalising constant (in units of r_max) giving g(1) = 1."""
        return float(np.sqrt(np.pi))


def radial_warp(r_prime, a):
    """Map normalised retinal radius to normalised image radius."""
    r = np.asarray(r_prime, dtype=np.float64)
    if not a > 1:
        raise RetinaParamError(f"concentration a must exceed 1, got {a}")
    if np.any(r < 0) or np.any(r > 1) or np.any(~np.isfinite(r)):
        raise ValueError("retinal radius must lie in [0, 1]")
    b = np.sqrt(np.pi)
    la = np.log(a)
    out = (b / np.sqrt(np.pi)) * (-np.expm1(la * r / 2)) / (-np.expm1(la / 2))
    return out if out.ndim else float(out)


def retinal_axis(n):
    return np.linspace(-1.0, 1.0, n)


def radius_scale(shape):
    """Isotropic pixel distance that retinal radius 1 reaches: the image diagonal.

    The diagonal bounds the distance from any fixation to the farthest corner,
    so r' = 1 always reaches every pixel, and the warp depends on the fixation
    by translation only.
    """
    H, W = shape
    return float(np.hypot(H, W))


def warp_offsets(u, v, a, shape):
    """Pixel offsets from the fixation for retinal points (u, v) in [-1, 1]^2."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    rho = np.hypot(u, v)
    r_prime = np.clip(rho / np.sqrt(2.0), 0.0, 1.0)
    r = radius_scale(shape) * radial_warp(r_prime, a)
    with np.errstate(invalid="ignore", divide="ignore"):
        gain = np.where(rho > 0, r / np.where(rho > 0, rho, 1.0), 0.0)
    return u * gain, v * gain


@lru_cache(maxsize=64)
def _grid_offsets(a, grid, H, W):
    axis = retinal_axis(grid)
    v, u = np.meshgrid(axis, axis, indexing="ij")
    dx, dy = warp_offsets(u, v, a, (H, W))
    dx.setflags(write=False)
    dy.setflags(write=False)
    return dx, dy


def build_sampling_grid(params, shape):
    """Source coordinates (x, y) in pixel-edge units for every retinal sample.

    Returns two (grid, grid) arrays; row i, column j is retinal point
    (u_j, v_i).  x runs along image columns, y along rows; (0, 0) is the top
    left image corner and (W, H) the bottom right one.
    """
    H, W = shape
    dx, dy = _grid_offsets(float(params.a), params.grid, H, W)
    fx, fy = params.fixation
    return fx * W + dx, fy * H + dy


def fixation_grid(fixations, a, shape, grid=64):
    """Batched :func:`build_sampling_grid`; returns index-space (py, px), each (N, grid*grid)."""
    H, W = shape
    fix = np.asarray(fixations, dtype=np.float64).reshape(-1, 2)
    dx, dy = _grid_offsets(float(a), grid, H, W)
    px = fix[:, 0:1] * W + dx.reshape(1, -1) - 0.5
    py = fix[:, 1:2] * H + dy.reshape(1, -1) - 0.5
    return py, px


def sample_image(image, py, px, grid=64):
    """Bilinear retinal sample of ``image`` (N,C,H,W) at index coordinates.

    Samples falling outside the image read zero.  Differentiable with respect
    to the image when it is a tensor that requires grad.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim == 3:
        image = T.reshape(image, (1,) + image.shape)
    N, C = image.shape[:2]
    out = T.bilinear_sample(image, py, px)
    return T.reshape(out, (N, C, grid, grid))


def retinal_view(images, fixations, a, grid=64):
    """Foveated views of a batch of images around their fixations."""
    data = images.data if isinstance(images, Tensor) else images
    py, px = fixation_grid(fixations, a, data.shape[-2:], grid)
    return sample_image(images, py, px, grid)


def cell_centres(n_cells, grid=64):
    """Retinal (u, v) coordinates of the centres of an n_cells x n_cells pooled map."""
    axis = retinal_axis(grid).reshape(n_cells, grid // n_cells).mean(axis=1)
    v, u = np.meshgrid(axis, axis, indexing="ij")
    return u, v


def retinal_cells_to_image(fixation, a, shape, n_cells=16, grid=64):
    """Normalised image coordinates (x, y) of each pooled retinal cell, clipped to [0, 1]."""
    H, W = shape
    u, v = cell_centres(n_cells, grid)
    dx, dy = warp_offsets(u, v, a, shape)
    x = np.clip(fixation[0] + dx / W, 0.0, 1.0)
    y = np.clip(fixation[1] + dy / H, 0.0, 1.0)
    return x, y


def warp_dump(path, params, shape):
    """Write the sampling grid as CSV rows (retinal_x, retinal_y, source_x, source_y)."""
    sx, sy = build_sampling_grid(params, shape)
    axis = retinal_axis(params.grid)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["retinal_x", "retinal_y", "source_x", "source_y"])
        for i in range(params.grid):
            for j in range(params.grid):
                w.writerow([f"{axis[j]:.9g}", f"{axis[i]:.9g}", f"{sx[i, j]:.9g}", f"{sy[i, j]:.9g}"])


def _warp_slope(r_prime, a):
    la = np.log(a)
    return -(la / 2) * np.exp(la * r_prime / 2) / (-np.expm1(la / 2))


@lru_cache(maxsize=64)
def area_weights(a, shape, grid=64):
    """Image area (pixel^2 per unit retinal area) represented by each retinal sample.

    This is the Jacobian determinant of the warp, ``(r / rho) * dr/drho``; it
    turns a density sampled on the retinal grid into probability mass.
    """
    axis = retinal_axis(grid)
    v, u = np.meshgrid(axis, axis, indexing="ij")
    rho = np.hypot(u, v)
    r_prime = np.clip(rho / np.sqrt(2.0), 0.0, 1.0)
    scale = radius_scale(shape)
    drdrho = scale * _warp_slope(r_prime, a) / np.sqrt(2.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, scale * radial_warp(r_prime, a) / np.where(rho > 0, rho, 1.0),
                         drdrho)
    out = ratio * drdrho
    out.setflags(write=False)
    return out
