"""Occupancy voxel grid from a satellite height field, and ray casting into it.

Cell ``(ix, iy, iz)`` covers ``[ix, ix+1) x [iy, iy+1) x [iz, iz+1)`` in voxel
units; ``ix`` follows satellite columns and ``iy`` satellite rows, so voxel
x/y coordinates are satellite pixel coordinates when one voxel spans one
satellite pixel.  Layer ``ground_level`` is solid everywhere; its top face at
``z = ground_level + 1`` is the ground surface.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image as PILImage

from .core import DecodeError, read_tensor
from .geometry import SphericalRay, ray_direction

# an outdated system TBB only disables that backend; numba falls back by itself
warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)

GROUND_LEVEL = 0
DEFAULT_CAMERA_HEIGHT_M = 2.5


class NonFiniteHeight(ValueError):
    pass


class InvalidPose(ValueError):
    pass


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True, eq=False)
class HeightField:
    """Meters above ground per satellite pixel, indexed ``values[row, col]``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 3 and v.shape[2] == 1:
            v = v[:, :, 0]
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"height field must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteHeight("height field contains NaN or Inf")
        if v.min() < 0:
            raise ValueError("heights must be >= 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def load_height_png(path: str | os.PathLike, scale: float = 1.0) -> HeightField:
    """16-bit (or 8-bit) single-channel PNG; meters = stored value * ``scale``."""
    try:
        with PILImage.open(path) as im:
            im.load()
            arr = np.array(im, dtype=np.float64)
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, exc) from exc
    if arr.ndim != 2:
        raise DecodeError(path, f"height map must be single-channel, got shape {arr.shape}")
    return HeightField(arr * scale)


def save_height_png(h: HeightField, path: str | os.PathLike, scale: float = 1.0) -> None:
    raw = np.rint(h.values / scale)
    if raw.max() > 65535:
        raise ValueError("heights overflow 16-bit PNG at this scale")
    PILImage.fromarray(raw.astype(np.uint16)).save(path)


def load_height(path: str | os.PathLike, scale: float = 1.0) -> HeightField:
    if Path(path).suffix.lower() == ".cvdf":
        return HeightField(read_tensor(path).data)
    return load_height_png(path, scale)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray  # (nx, ny, nz) bool
    meters_per_voxel: float
    ground_level: int = GROUND_LEVEL

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.bool_)
        if occ.ndim != 3:
            raise ValueError("occupancy must be 3-D")
        if not occ[:, :, : self.ground_level + 1].all():
            raise ValueError("ground layer must be solid")
        above = occ[:, :, self.ground_level + 1 :]
        below = occ[:, :, self.ground_level : -1]
        if np.any(above & ~below):
            raise ValueError("column occupancy must be contiguous from the ground up")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def nx(self) -> int:
        return self.occupancy.shape[0]

    @property
    def ny(self) -> int:
        return self.occupancy.shape[1]

    @property
    def nz(self) -> int:
        return self.occupancy.shape[2]

    def column_tops(self) -> np.ndarray:
        """Highest occupied layer per column, shape ``(nx, ny)``."""
        return self.occupancy.sum(axis=2) - 1

    def diagonal(self) -> float:
        return math.sqrt(self.nx**2 + self.ny**2 + self.nz**2)


def grid_from_height(h: HeightField, meters_per_voxel: float, nz: int) -> VoxelGrid:
    """Extrude every satellite pixel into a solid column.

    Column ``(ix, iy)`` is filled from the ground layer through
    ``ground_level + round(h[iy, ix] / meters_per_voxel)`` (half-up rounding),
    clamped to the top layer.
    """
    if meters_per_voxel <= 0:
        raise ValueError("meters_per_voxel must be positive")
    if nz < 2:
        raise ValueError("nz must be >= 2")
    if not np.all(np.isfinite(h.values)):
        raise NonFiniteHeight("height field contains NaN or Inf")
    tops = GROUND_LEVEL + _round_half_up(h.values / meters_per_voxel)
    tops = np.minimum(tops, nz - 1).T  # -> (nx, ny)
    occ = np.arange(nz)[None, None, :] <= tops[:, :, None]
    return VoxelGrid(occ, float(meters_per_voxel), GROUND_LEVEL)


@dataclass(frozen=True)
class CameraPose:
    x_cen: float
    y_cen: float
    z_cam: float


def default_pose(grid: VoxelGrid, camera_height_m: float = DEFAULT_CAMERA_HEIGHT_M) -> CameraPose:
    """Camera at the grid center, ``camera_height_m`` above the ground surface."""
    lift = int(_round_half_up(camera_height_m / grid.meters_per_voxel))
    pose = CameraPose(grid.nx / 2, grid.ny / 2, float(grid.ground_level + 1 + lift))
    validate_pose(grid, pose)
    return pose


def validate_pose(grid: VoxelGrid, pose: CameraPose) -> None:
    if not (0 <= pose.x_cen < grid.nx and 0 <= pose.y_cen < grid.ny):
        raise InvalidPose(f"camera ({pose.x_cen}, {pose.y_cen}) outside the grid footprint")
    if not (grid.ground_level < pose.z_cam < grid.nz):
        raise InvalidPose(f"camera height {pose.z_cam} outside ({grid.ground_level}, {grid.nz})")
    cell = (int(pose.x_cen), int(pose.y_cen), int(math.floor(pose.z_cam)))
    if grid.occupancy[cell]:
        raise InvalidPose(f"camera cell {cell} is occupied")


@dataclass(frozen=True)
class RayHit:
    hit: bool
    R: float | None = None
    hit_cell: tuple[int, int, int] | None = None


_INF = np.inf


@numba.njit(cache=True)
def _march(occ, ox, oy, oz, dx, dy, dz, max_range):
    # Amanatides-Woo traversal; returns (hit, t_entry, ix, iy, iz)
    nx, ny, nz = occ.shape
    ix = int(math.floor(ox))
    iy = int(math.floor(oy))
    iz = int(math.floor(oz))
    if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
        return False, 0.0, -1, -1, -1
    if occ[ix, iy, iz]:
        return True, 0.0, ix, iy, iz

    if dx > 0.0:
        sx = 1
        tmx = (ix + 1 - ox) / dx
        tdx = 1.0 / dx
    elif dx < 0.0:
        sx = -1
        tmx = (ix - ox) / dx
        tdx = -1.0 / dx
    else:
        sx = 0
        tmx = _INF
        tdx = _INF
    if dy > 0.0:
        sy = 1
        tmy = (iy + 1 - oy) / dy
        tdy = 1.0 / dy
    elif dy < 0.0:
        sy = -1
        tmy = (iy - oy) / dy
        tdy = -1.0 / dy
    else:
        sy = 0
        tmy = _INF
        tdy = _INF
    if dz > 0.0:
        sz = 1
        tmz = (iz + 1 - oz) / dz
        tdz = 1.0 / dz
    elif dz < 0.0:
        sz = -1
        tmz = (iz - oz) / dz
        tdz = -1.0 / dz
    else:
        sz = 0
        tmz = _INF
        tdz = _INF

    while True:
        if tmx <= tmy and tmx <= tmz:
            t = tmx
            ix += sx
            tmx += tdx
        elif tmy <= tmz:
            t = tmy
            iy += sy
            tmy += tdy
        else:
            t = tmz
            iz += sz
            tmz += tdz
        if t > max_range or t == _INF:
            return False, 0.0, -1, -1, -1
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
            return False, 0.0, -1, -1, -1
        if occ[ix, iy, iz]:
            return True, t, ix, iy, iz


@numba.njit(parallel=True, cache=True)
def _march_many(occ, ox, oy, oz, dirs, max_range, hit, dist, cells):
    for k in numba.prange(dirs.shape[0]):
        h, t, ix, iy, iz = _march(occ, ox, oy, oz, dirs[k, 0], dirs[k, 1], dirs[k, 2], max_range)
        hit[k] = h
        dist[k] = t
        cells[k, 0] = ix
        cells[k, 1] = iy
        cells[k, 2] = iz


def cast_ray(
    grid: VoxelGrid, pose: CameraPose, ray: SphericalRay, max_range: float | None = None
) -> RayHit:
    """First occupied cell along ``ray`` from the camera.

    ``R`` is the 3-D distance from the camera to the entry face of that cell.
    Rays leaving the grid footprint or its top, or running past
    ``max_range`` (default: grid diagonal), are misses.
    """
    if max_range is None:
        max_range = grid.diagonal()
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    dx, dy, dz = ray_direction(ray)
    hit, t, ix, iy, iz = _march(
        grid.occupancy, float(pose.x_cen), float(pose.y_cen), float(pose.z_cam), dx, dy, dz,
        float(max_range),
    )
    if not hit:
        return RayHit(False)
    return RayHit(True, float(t), (int(ix), int(iy), int(iz)))


def cast_rays(
    grid: VoxelGrid, pose: CameraPose, directions: np.ndarray, max_range: float | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`cast_ray` over unit directions of shape ``(..., 3)``.

    Returns ``(hit, R, cells)``; ``R`` is NaN and ``cells`` is -1 for misses.
    """
    if max_range is None:
        max_range = grid.diagonal()
    lead = directions.shape[:-1]
    dirs = np.ascontiguousarray(directions.reshape(-1, 3), dtype=np.float64)
    n = dirs.shape[0]
    hit = np.zeros(n, dtype=np.bool_)
    dist = np.zeros(n, dtype=np.float64)
    cells = np.zeros((n, 3), dtype=np.int64)
    _march_many(
        grid.occupancy, float(pose.x_cen), float(pose.y_cen), float(pose.z_cam), dirs,
        float(max_range), hit, dist, cells,
    )
    dist[~hit] = np.nan
    return hit.reshape(lead), dist.reshape(lead), cells.reshape(*lead, 3)
