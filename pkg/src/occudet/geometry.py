"""Pinhole cameras, the voxel grid frame, and index/coordinate affine maps.

Conventions: world frame equals the ego frame of the sample.  Camera frames
are +x right, +y down, +z forward, so a point is visible when its camera-
frame z is positive and its projection lands inside the image.  Voxel cell i
has its center at origin + (i + 0.5) * voxel_size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import Array

BEHIND_EPS = 1e-6


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics K (3x3), world-to-camera T_wc (4x4), image (W, H)."""

    K: Array
    T_wc: Array
    image_size: tuple[int, int]

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        T = np.asarray(self.T_wc, dtype=np.float64)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T_wc", T)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("K must be 3x3 with positive focal lengths")
        if T.shape != (4, 4) or not np.allclose(T[3], [0, 0, 0, 1]):
            raise ValueError("T_wc must be 4x4 with bottom row (0,0,0,1)")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block must be orthonormal")

    @property
    def center(self) -> Array:
        """Camera center in world coordinates."""
        R = self.T_wc[:3, :3]
        t = self.T_wc[:3, 3]
        return -R.T @ t


def project_points(points: Array, cam: CameraModel):
    """Project world points (..., 3) -> (uv (..., 2), depth (...), visible).

    Depth is camera-frame z.  Points behind the camera (depth <= 1e-6) or
    projecting outside the image are flagged invisible, not errors.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    R = cam.T_wc[:3, :3]
    t = cam.T_wc[:3, 3]
    pc = pts @ R.T + t
    depth = pc[..., 2]
    front = depth > BEHIND_EPS
    safe = np.where(front, depth, 1.0)
    u = cam.K[0, 0] * pc[..., 0] / safe + cam.K[0, 2]
    v = cam.K[1, 1] * pc[..., 1] / safe + cam.K[1, 2]
    W, H = cam.image_size
    visible = front & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uv = np.stack([u, v], axis=-1)
    if single:
        return uv[0], float(depth[0]), bool(visible[0])
    return uv, depth, visible


def project_point(c: Array, cam: CameraModel):
    """Single-point convenience wrapper: returns (u, v, depth, visible)."""
    uv, depth, visible = project_points(np.asarray(c, dtype=np.float64), cam)
    return float(uv[0]), float(uv[1]), depth, visible


def back_project_pixels(uv: Array, depth: Array, cam: CameraModel) -> Array:
    """Inverse of project_points for depth > 0: pixel + z-depth -> world."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(d <= 0):
        raise ValueError("back_project_pixels requires depth > 0")
    x = (uv[:, 0] - cam.K[0, 2]) / cam.K[0, 0] * d
    y = (uv[:, 1] - cam.K[1, 2]) / cam.K[1, 1] * d
    pc = np.stack([x, y, d], axis=-1)
    R = cam.T_wc[:3, :3]
    t = cam.T_wc[:3, 3]
    return (pc - t) @ R


def back_project_pixel(u: float, v: float, depth: float,
                       cam: CameraModel) -> Array:
    return back_project_pixels(np.array([[u, v]]), np.array([depth]), cam)[0]


@dataclass(frozen=True)
class VoxelGridSpec:
    """Regular lattice: origin = min corner (m), per-axis voxel size, counts."""

    origin: Array
    voxel_size: Array
    dims: tuple[int, int, int]

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        v = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "voxel_size", v)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if np.any(v <= 0):
            raise ValueError("voxel_size must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be >= 1")

    @property
    def center(self) -> Array:
        return self.origin + np.asarray(self.dims) * self.voxel_size / 2.0

    def index_to_coord(self, idx: Array) -> Array:
        """Cell-center coordinates: origin + (i + 0.5) * voxel_size."""
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def coord_to_index(self, coord: Array) -> Array:
        """Exact affine inverse of index_to_coord (continuous index)."""
        return (np.asarray(coord, dtype=np.float64) - self.origin) / self.voxel_size - 0.5

    def index_to_coord_matrix(self) -> Array:
        """4x4 homogeneous form of index_to_coord."""
        m = np.eye(4)
        m[:3, :3] = np.diag(self.voxel_size)
        m[:3, 3] = self.origin + 0.5 * self.voxel_size
        return m

    def coord_to_index_matrix(self) -> Array:
        """4x4 homogeneous form of coord_to_index."""
        m = np.eye(4)
        m[:3, :3] = np.diag(1.0 / self.voxel_size)
        m[:3, 3] = -self.origin / self.voxel_size - 0.5
        return m

    def cell_centers(self) -> Array:
        """(X, Y, Z, 3) array of cell-center world coordinates."""
        X, Y, Z = self.dims
        ix, iy, iz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z),
                                 indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.index_to_coord(idx)


@dataclass(frozen=True)
class Transform3D:
    """Invertible 4x4 homogeneous transform."""

    M: Array

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        object.__setattr__(self, "M", M)
        if M.shape != (4, 4):
            raise ValueError("transform must be 4x4")
        if abs(np.linalg.det(M[:3, :3])) <= 1e-9:
            raise ValueError("transform linear block is singular")

    @staticmethod
    def identity() -> "Transform3D":
        return Transform3D(np.eye(4))

    def compose(self, other: "Transform3D") -> "Transform3D":
        """self after other: (self.compose(other)).apply(x) = self(other(x))."""
        return Transform3D(self.M @ other.M)

    def inverse(self) -> "Transform3D":
        R = self.M[:3, :3]
        t = self.M[:3, 3]
        Ri = np.linalg.inv(R)
        M = np.eye(4)
        M[:3, :3] = Ri
        M[:3, 3] = -Ri @ t
        return Transform3D(M)

    def apply(self, points: Array) -> Array:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.M[:3, :3].T + self.M[:3, 3]


def apply_homogeneous(M: Array, points: Array) -> Array:
    """Apply a 4x4 affine matrix to (..., 3) points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ np.asarray(M)[:3, :3].T + np.asarray(M)[:3, 3]
