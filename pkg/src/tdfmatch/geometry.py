"""Core 3D types: camera model, depth frames, rigid transforms.

Point clouds are plain ``(N, 3)`` float64 arrays and points are length-3
arrays; everything else is a frozen dataclass whose arrays are made
read-only on construction.

Pose convention: a frame's pose maps camera coordinates to world
coordinates, ``p_world = R @ p_cam + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

ROTATION_TOL = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def as_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point has non-finite components")
    return p


def as_cloud(points) -> np.ndarray:
    """Coerce ``points`` into a finite ``(N, 3)`` float64 array."""
    c = np.asarray(points, dtype=np.float64)
    if c.size == 0:
        return np.zeros((0, 3))
    c = c.reshape(-1, 3)
    if not np.all(np.isfinite(c)):
        raise ValueError("cloud has non-finite coordinates")
    return c


def rotation_error(r: np.ndarray) -> float:
    """Max-abs deviation of ``RᵀR`` from identity."""
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("rotation must be a finite 3x3 matrix")
        if rotation_error(r) > ROTATION_TOL or np.linalg.det(r) <= 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be 0 0 0 1")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map points (single or ``(N, 3)``) through ``R·p + t``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def transform_cloud(t: RigidTransform, cloud) -> np.ndarray:
    return t.apply(as_cloud(cloud))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    # re-orthonormalise so long chains don't drift past the tolerance
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (via a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle_deg(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points_cam) -> np.ndarray:
        """Continuous pixel coordinates ``(u, v)`` for camera-space points."""
        p = np.asarray(points_cam, dtype=np.float64)
        u = self.fx * p[..., 0] / p[..., 2] + self.cx
        v = self.fy * p[..., 1] / p[..., 2] + self.cy
        return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class DepthFrame:
    """Depth image in meters (0 = missing) with its camera and pose."""

    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: RigidTransform

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"depth grid {d.shape} does not match intrinsics "
                f"{(self.intrinsics.height, self.intrinsics.width)}"
            )
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth values must be finite and non-negative")
        object.__setattr__(self, "depth", _frozen(d))

    @property
    def camera_center(self) -> np.ndarray:
        return self.pose.translation


def back_project(frame: DepthFrame) -> np.ndarray:
    """Camera-space points for every pixel with positive depth, row-major."""
    k = frame.intrinsics
    v, u = np.nonzero(frame.depth > 0)
    d = frame.depth[v, u]
    return np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d], axis=1)


def nearest_neighbor(query, cloud, tree: cKDTree | None = None) -> tuple[int, float]:
    """Index of and distance to the closest cloud point; ties go to the lowest index.

    A KD-tree finds the minimum distance, then every point at that exact
    distance is recovered so the tie rule matches an exhaustive scan.
    """
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    q = as_point(query)
    if tree is None:
        tree = cKDTree(cloud)
    d, _ = tree.query(q)
    cand = np.asarray(tree.query_ball_point(q, d * (1 + 1e-9) + 1e-300), dtype=np.intp)
    dist = np.sqrt(np.sum((cloud[cand] - q) ** 2, axis=1))
    best = dist.min()
    idx = int(cand[dist == best].min())
    return idx, float(best)
