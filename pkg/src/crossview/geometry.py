"""Equirectangular panorama <-> spherical angles <-> satellite plane.

Frame conventions
-----------------
* Panorama coordinates are continuous: ``x_pano`` in ``[0, W]`` runs left to
  right, ``y_pano`` in ``[0, H]`` runs top to bottom.  Pixel ``(i, j)`` is
  sampled at its center ``(i + 0.5, j + 0.5)``.
* ``theta`` is elevation (``+pi/2`` at the top row), ``phi`` is azimuth
  (``0`` at the center column, ``-pi`` / ``+pi`` at the left / right edge,
  which are the same direction).
* The satellite / voxel plane uses image axes: ``x`` grows with the column
  index, ``y`` grows with the row index.  A ray with azimuth ``phi`` moves by
  ``(cos phi, -sin phi)`` on that plane, so ``phi = 0`` looks toward
  increasing columns and ``phi = +pi/2`` toward decreasing rows (image up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class OutOfFrame(ValueError):
    """Panorama coordinate outside the closed frame."""


@dataclass(frozen=True)
class PanoramaDims:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width != 2 * self.height:
            raise ValueError(
                f"equirectangular frame needs width == 2 * height, got {self.height}x{self.width}"
            )

    @classmethod
    def from_height(cls, height: int) -> "PanoramaDims":
        return cls(height, 2 * height)


@dataclass(frozen=True)
class SphericalRay:
    theta: float
    phi: float

    def __post_init__(self):
        if not (-math.pi / 2 <= self.theta <= math.pi / 2):
            raise ValueError(f"theta {self.theta} outside [-pi/2, pi/2]")
        if not (-math.pi <= self.phi <= math.pi):
            raise ValueError(f"phi {self.phi} outside [-pi, pi]")


@dataclass(frozen=True)
class SatCoord:
    x_sate: float
    y_sate: float


def pano_to_angles(x_pano: float, y_pano: float, dims: PanoramaDims) -> SphericalRay:
    if not (0.0 <= x_pano <= dims.width and 0.0 <= y_pano <= dims.height):
        raise OutOfFrame(f"({x_pano}, {y_pano}) outside {dims.width}x{dims.height} frame")
    theta = math.pi / 2 - y_pano * math.pi / dims.height
    phi = x_pano * 2 * math.pi / dims.width - math.pi
    # clamp rounding spill at the frame edges
    theta = min(max(theta, -math.pi / 2), math.pi / 2)
    phi = min(max(phi, -math.pi), math.pi)
    return SphericalRay(theta, phi)


def angles_to_pano(ray: SphericalRay, dims: PanoramaDims) -> tuple[float, float]:
    x_pano = (ray.phi + math.pi) * dims.width / (2 * math.pi)
    y_pano = (math.pi / 2 - ray.theta) * dims.height / math.pi
    return x_pano, y_pano


def ray_direction(ray: SphericalRay) -> tuple[float, float, float]:
    """Unit direction ``(cos t cos p, -cos t sin p, sin t)`` in the voxel frame."""
    ct = math.cos(ray.theta)
    return (ct * math.cos(ray.phi), -ct * math.sin(ray.phi), math.sin(ray.theta))


def angles_to_satellite(ray: SphericalRay, R: float, center: tuple[float, float]) -> SatCoord:
    if R < 0:
        raise ValueError("ray length must be non-negative")
    x_cen, y_cen = center
    horizontal = R * math.cos(ray.theta)
    return SatCoord(x_cen + horizontal * math.cos(ray.phi), y_cen - horizontal * math.sin(ray.phi))


def pixel_center_angles(dims: PanoramaDims) -> tuple[np.ndarray, np.ndarray]:
    """Elevation per row and azimuth per column at pixel centers.

    Returns ``(theta, phi)`` with shapes ``(H,)`` and ``(W,)``.
    """
    rows = np.arange(dims.height) + 0.5
    cols = np.arange(dims.width) + 0.5
    theta = np.pi / 2 - rows * np.pi / dims.height
    phi = cols * 2 * np.pi / dims.width - np.pi
    return theta, phi


def direction_grid(dims: PanoramaDims) -> np.ndarray:
    """Unit ray directions for every pixel center, shape ``(H, W, 3)``."""
    theta, phi = pixel_center_angles(dims)
    ct = np.cos(theta)[:, None]
    return np.stack(
        [
            ct * np.cos(phi)[None, :],
            -ct * np.sin(phi)[None, :],
            np.broadcast_to(np.sin(theta)[:, None], (dims.height, dims.width)),
        ],
        axis=-1,
    )
