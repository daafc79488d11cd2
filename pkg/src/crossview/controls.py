"""Structure map, cross-view texture mapping and the distance weight matrix."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy.special import expit

from .core import DimensionMismatch, Tensor, read_tensor, write_tensor
from .geometry import PanoramaDims, direction_grid, pixel_center_angles
from .voxel import CameraPose, VoxelGrid, cast_rays, validate_pose

DEFAULT_BETA = 0.05
SKY_ROW_WEIGHT = 0.25
NONE_SENTINEL = -1.0


@dataclass(frozen=True, eq=False)
class StructureMap:
    dims: PanoramaDims
    bits: np.ndarray  # (H, W) bool, True where the ray hit the scene

    def to_image_array(self) -> np.ndarray:
        return self.bits.astype(np.uint8) * 255


@dataclass(frozen=True, eq=False)
class TextureMapping:
    """Per-pixel satellite coordinates; NaN rows mark sky (no hit).

    ``coords[y, x] = (x_sate, y_sate)`` in full-resolution satellite pixels.
    ``sat_shape`` is the ``(rows, cols)`` footprint the coordinates refer to.
    """

    dims: PanoramaDims
    coords: np.ndarray  # (H, W, 2) float64
    sat_shape: tuple[int, int]

    @property
    def mapped(self) -> np.ndarray:
        return ~np.isnan(self.coords[..., 0])


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    values: np.ndarray  # (h_p * w_p, h_s * w_s)
    beta: float
    control_dims: tuple[int, int]
    sat_dims: tuple[int, int]
    mapped_rows: np.ndarray  # (h_p * w_p,) bool
    points: np.ndarray  # (h_p * w_p, 2) pooled p*, NaN for sky rows


def _cast_panorama(grid: VoxelGrid, pose: CameraPose, dims: PanoramaDims, max_range=None):
    validate_pose(grid, pose)
    return cast_rays(grid, pose, direction_grid(dims), max_range)


def build_structure_map(
    grid: VoxelGrid, pose: CameraPose, dims: PanoramaDims, max_range: float | None = None
) -> StructureMap:
    hit, _, _ = _cast_panorama(grid, pose, dims, max_range)
    return StructureMap(dims, hit)


def _mapping_from_hits(grid, pose, dims, hit, dist) -> TextureMapping:
    theta, phi = pixel_center_angles(dims)
    horizontal = dist * np.cos(theta)[:, None]
    coords = np.empty((dims.height, dims.width, 2))
    coords[..., 0] = pose.x_cen + horizontal * np.cos(phi)[None, :]
    coords[..., 1] = pose.y_cen - horizontal * np.sin(phi)[None, :]
    coords[~hit] = np.nan
    return TextureMapping(dims, coords, (grid.ny, grid.nx))


def build_texture_mapping(
    grid: VoxelGrid, pose: CameraPose, dims: PanoramaDims, max_range: float | None = None
) -> TextureMapping:
    hit, dist, _ = _cast_panorama(grid, pose, dims, max_range)
    return _mapping_from_hits(grid, pose, dims, hit, dist)


def build_controls(
    grid: VoxelGrid, pose: CameraPose, dims: PanoramaDims, max_range: float | None = None
) -> tuple[StructureMap, TextureMapping]:
    """Structure map and texture mapping from a single set of ray casts."""
    hit, dist, _ = _cast_panorama(grid, pose, dims, max_range)
    return StructureMap(dims, hit), _mapping_from_hits(grid, pose, dims, hit, dist)


def pool_mapping(mapping: TextureMapping, control_dims: tuple[int, int]) -> np.ndarray:
    """Mean mapped coordinate per control block, ignoring sky pixels.

    Returns ``(h_p * w_p, 2)`` with NaN rows for all-sky blocks.
    """
    h_p, w_p = control_dims
    H, W = mapping.dims.height, mapping.dims.width
    if h_p < 1 or w_p < 1 or H % h_p or W % w_p:
        raise DimensionMismatch(f"control dims {control_dims} do not divide panorama {H}x{W}")
    blocks = mapping.coords.reshape(h_p, H // h_p, w_p, W // w_p, 2)
    valid = ~np.isnan(blocks[..., :1])
    count = valid.sum(axis=(1, 3))
    total = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        pooled = total / count
    pooled[count[..., 0] == 0] = np.nan
    return pooled.reshape(h_p * w_p, 2)


def satellite_token_centers(sat_shape: tuple[int, int], sat_dims: tuple[int, int]) -> np.ndarray:
    """Token centers in full-resolution satellite pixels, row-major, shape ``(h_s*w_s, 2)``."""
    rows, cols = sat_shape
    h_s, w_s = sat_dims
    if h_s < 1 or w_s < 1 or rows % h_s or cols % w_s:
        raise DimensionMismatch(f"satellite token dims {sat_dims} do not divide {rows}x{cols}")
    bh, bw = rows // h_s, cols // w_s
    ys, xs = np.meshgrid((np.arange(h_s) + 0.5) * bh, (np.arange(w_s) + 0.5) * bw, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def build_weight_matrix(
    mapping: TextureMapping,
    control_dims: tuple[int, int],
    sat_dims: tuple[int, int],
    beta: float = DEFAULT_BETA,
) -> WeightMatrix:
    """Distance weights ``M_j = 1 - sigmoid(beta * |p* - p_j|)``.

    ``p*`` is the block-mean mapped coordinate of each control token and
    ``p_j`` runs over satellite token centers; distances are in
    full-resolution satellite pixels.  All-sky control rows get the
    constant :data:`SKY_ROW_WEIGHT`.
    """
    if not beta >= 0 or not np.isfinite(beta):
        raise ValueError("beta must be a finite non-negative number")
    points = pool_mapping(mapping, control_dims)
    centers = satellite_token_centers(mapping.sat_shape, sat_dims)
    mapped = ~np.isnan(points[:, 0])
    values = np.full((points.shape[0], centers.shape[0]), SKY_ROW_WEIGHT)
    if mapped.any():
        diff = points[mapped, None, :] - centers[None, :, :]
        d = np.sqrt((diff**2).sum(axis=-1))
        values[mapped] = expit(-beta * d)
    return WeightMatrix(values, float(beta), tuple(control_dims), tuple(sat_dims), mapped, points)


@dataclass(frozen=True)
class WrapReport:
    rows: int
    differing_bits: int
    bit_rate: float
    max_coord_discrepancy: float
    compared_rows: int

    def as_dict(self) -> dict:
        return {
            "rows": self.rows,
            "differing_bits": self.differing_bits,
            "bit_rate": self.bit_rate,
            "max_coord_discrepancy": self.max_coord_discrepancy,
            "compared_rows": self.compared_rows,
        }


def check_wrap_continuity(s: StructureMap, m: TextureMapping) -> WrapReport:
    """Compare the first and last panorama columns, which share the seam azimuth."""
    left, right = s.bits[:, 0], s.bits[:, -1]
    differing = int(np.count_nonzero(left != right))
    both = m.mapped[:, 0] & m.mapped[:, -1]
    if both.any():
        gap = np.linalg.norm(m.coords[both, 0] - m.coords[both, -1], axis=-1)
        worst = float(gap.max())
    else:
        worst = 0.0
    rows = s.bits.shape[0]
    return WrapReport(rows, differing, differing / rows, worst, int(both.sum()))


def save_structure_map(s: StructureMap, path: str | os.PathLike) -> None:
    PILImage.fromarray(s.bits).convert("1").save(path)


def load_structure_map(path: str | os.PathLike) -> StructureMap:
    with PILImage.open(path) as im:
        bits = np.array(im.convert("1"), dtype=bool)
    return StructureMap(PanoramaDims(*bits.shape), bits)


def mapping_to_tensor(m: TextureMapping) -> Tensor:
    return Tensor(np.where(np.isnan(m.coords), NONE_SENTINEL, m.coords))


def mapping_from_tensor(t: Tensor, sat_shape: tuple[int, int]) -> TextureMapping:
    arr = t.data.astype(np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimensionMismatch(f"mapping tensor must be HxWx2, got {arr.shape}")
    arr = arr.copy()
    arr[(arr == NONE_SENTINEL).any(axis=-1)] = np.nan
    return TextureMapping(PanoramaDims(arr.shape[0], arr.shape[1]), arr, tuple(sat_shape))


def save_mapping(m: TextureMapping, path: str | os.PathLike) -> None:
    write_tensor(mapping_to_tensor(m), path)


def load_mapping(path: str | os.PathLike, sat_shape: tuple[int, int]) -> TextureMapping:
    return mapping_from_tensor(read_tensor(path), sat_shape)


def save_weight_matrix(w: WeightMatrix, path: str | os.PathLike) -> None:
    write_tensor(w.values, path)
