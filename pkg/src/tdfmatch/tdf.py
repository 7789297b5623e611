"""Truncated distance function (TDF) voxel patches around surface keypoints.

Each voxel holds ``1 - min(d / (trunc_margin * voxel_size), 1)`` where ``d``
is the distance from the voxel center to the closest surface sample, so
on-surface voxels read 1 and anything beyond the margin reads 0.

Grids are stored as ``values[x, y, z]``; on disk the linear order is
x-fastest (``x + dim * (y + dim * z)``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .fileio import FormatError
from .geometry import DepthFrame, RigidTransform, as_cloud, as_point, back_project

MAGIC = b"TDF1"
_HEADER = struct.Struct("<4s3I2f3f")


@dataclass(frozen=True)
class TdfConfig:
    grid_dim: int = 30
    voxel_size: float = 0.01
    trunc_margin: float = 5.0
    alignment: str = "camera"  # or "object"

    def __post_init__(self):
        if self.grid_dim < 2:
            raise ValueError("grid_dim must be at least 2")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not self.trunc_margin >= 1:
            raise ValueError("trunc_margin must be at least 1 voxel")
        if self.alignment not in ("camera", "object"):
            raise ValueError(f"unknown alignment {self.alignment!r}")

    @property
    def truncation(self) -> float:
        """Truncation distance in meters."""
        return self.trunc_margin * self.voxel_size

    @property
    def extent(self) -> float:
        return self.grid_dim * self.voxel_size


OBJECT_MODEL_CONFIG = TdfConfig(voxel_size=0.005, alignment="object")


@dataclass(frozen=True, eq=False)
class TdfPatch:
    values: np.ndarray
    config: TdfConfig
    origin: np.ndarray
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        n = self.config.grid_dim
        if v.shape != (n, n, n):
            raise ValueError(f"values shape {v.shape} does not match grid_dim {n}")
        if not np.all((v >= 0) & (v <= 1)):
            raise ValueError("TDF values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", as_point(self.origin))
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=np.float64))

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape ``(n, n, n, 3)``."""
        return voxel_centers(self.origin, self.config, self.axes)

    def linear(self) -> np.ndarray:
        """Values in x-fastest linear order."""
        return self.values.ravel(order="F")


def voxel_centers(origin, cfg: TdfConfig, axes=None) -> np.ndarray:
    idx = (np.arange(cfg.grid_dim) + 0.5) * cfg.voxel_size
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    local = np.stack([gx, gy, gz], axis=-1)
    if axes is not None:
        local = local @ np.asarray(axes, dtype=np.float64).T
    return local + as_point(origin)


def compute_tdf(cloud, origin, cfg: TdfConfig = TdfConfig()) -> TdfPatch:
    """TDF grid with axis-aligned voxels starting at ``origin``."""
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise ValueError("no surface points in region")
    centers = voxel_centers(origin, cfg).reshape(-1, 3)
    trunc = cfg.truncation
    d, _ = cKDTree(pts).query(centers, distance_upper_bound=trunc)
    vals = 1.0 - np.minimum(d / trunc, 1.0)
    n = cfg.grid_dim
    return TdfPatch(vals.reshape(n, n, n).astype(np.float32), cfg, origin)


def crop_to_patch(cloud, keypoint, cfg: TdfConfig, axes=None) -> np.ndarray:
    """Grid-local coordinates of the points inside the patch cube grown by the truncation distance.

    Anything outside that cube is farther than the truncation distance from
    every voxel center, so dropping it leaves every TDF value unchanged.
    """
    rot = np.eye(3) if axes is None else _rotation_of(axes)
    local = (as_cloud(cloud) - as_point(keypoint)) @ rot
    half = cfg.extent / 2.0 + cfg.truncation
    inside = np.all(np.abs(local) <= half, axis=1)
    return local[inside]


def extract_patch(source, keypoint, cfg: TdfConfig = TdfConfig(), axes=None) -> TdfPatch:
    """TDF patch centered on ``keypoint``.

    ``source`` is either a point cloud or a :class:`DepthFrame`.  For a cloud,
    ``axes`` (a rotation or :class:`RigidTransform`) gives the grid axes in
    the cloud's frame and defaults to the cloud's own axes.  For a depth
    frame, ``keypoint`` is in world coordinates and the grid follows the
    camera axes unless ``axes`` overrides it.
    """
    keypoint = as_point(keypoint)
    if isinstance(source, DepthFrame):
        pose = source.pose
        k_cam = (keypoint - pose.translation) @ pose.rotation
        cam_axes = None if axes is None else pose.rotation.T @ _rotation_of(axes)
        patch = extract_patch(back_project(source), k_cam, cfg, cam_axes)
        return replace(patch, origin=pose.apply(patch.origin), axes=pose.rotation @ patch.axes)

    rot = np.eye(3) if axes is None else _rotation_of(axes)
    local = crop_to_patch(source, keypoint, cfg, rot)
    if len(local) == 0:
        raise ValueError("empty patch")
    corner = np.full(3, -cfg.extent / 2.0)
    patch = compute_tdf(local, corner, cfg)
    return replace(patch, origin=keypoint + rot @ corner, axes=rot)


def _rotation_of(axes) -> np.ndarray:
    if isinstance(axes, RigidTransform):
        return axes.rotation
    return np.asarray(axes, dtype=np.float64).reshape(3, 3)


# ------------------------------------------------------------------ file format

def write_tdf(path, patch: TdfPatch) -> None:
    n = patch.config.grid_dim
    header = _HEADER.pack(
        MAGIC, n, n, n, patch.config.voxel_size, patch.config.trunc_margin, *patch.origin
    )
    body = patch.linear().astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_tdf(path) -> TdfPatch:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected TDF1")
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: unexpected end of file")
    _, nx, ny, nz, voxel, margin, ox, oy, oz = _HEADER.unpack_from(data)
    if not (nx == ny == nz) or nx < 2:
        raise FormatError(f"{path}: dimension mismatch ({nx}, {ny}, {nz})")
    count = nx * ny * nz
    body = data[_HEADER.size:]
    if len(body) < 4 * count:
        raise FormatError(f"{path}: unexpected end of file")
    if len(body) > 4 * count:
        raise FormatError(f"{path}: dimension mismatch (trailing bytes)")
    vals = np.frombuffer(body, dtype="<f4")
    if not np.all((vals >= 0) & (vals <= 1)):
        raise FormatError(f"{path}: value out of range")
    try:
        cfg = TdfConfig(grid_dim=nx, voxel_size=float(voxel), trunc_margin=float(margin))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    grid = vals.reshape((nx, nx, nx), order="F")
    return TdfPatch(grid, cfg, (ox, oy, oz))
