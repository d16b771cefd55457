"""Joint spatial augmentation for boxes and voxel supervision.

One sampled rigid-plus-scale transform is applied exactly to box labels and
realized on the occupancy side by warping voxel-feature lattices: original
cell centers are pushed through the transform, converted back to continuous
indices, and the feature volume is resampled there, with an out-of-range
mask excluding evacuated cells from the loss.

Composition order is fixed and documented: flip, then isotropic scale, then
yaw rotation (all about the grid center), then translation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Transform3D, VoxelGridSpec, apply_homogeneous
from .heads import Box3D, OccupancyGrid, wrap_angle
from .losses import LossWeights, occupancy_loss
from .ops import Array
from .sampling import trilinear_sample_3d


@dataclass
class AugSpec:
    """Parameter ranges; all draws are uniform, flips are Bernoulli."""

    yaw_range: float = np.deg2rad(22.5)      # +/- radians
    scale_range: tuple[float, float] = (0.95, 1.05)
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.5
    trans_range: tuple[float, float, float] = (0.5, 0.5, 0.5)  # +/- meters

    def __post_init__(self):
        if self.yaw_range < 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError("ranges must be well ordered")
        if not (0 <= self.flip_x_prob <= 1 and 0 <= self.flip_y_prob <= 1):
            raise ValueError("flip probabilities must be in [0, 1]")
        if any(t < 0 for t in self.trans_range):
            raise ValueError("translation range must be nonnegative")


@dataclass
class AugSample:
    """One realized augmentation: the 4x4 matrix plus its parameters."""

    transform: Transform3D
    yaw: float
    scale: float
    flip_x: bool
    flip_y: bool
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def to_dict(self) -> dict:
        return {"yaw": self.yaw, "scale": self.scale,
                "flip_x": bool(self.flip_x), "flip_y": bool(self.flip_y),
                "translation": np.asarray(self.translation).tolist()}

    @property
    def is_identity(self) -> bool:
        return (self.yaw == 0.0 and self.scale == 1.0 and not self.flip_x
                and not self.flip_y and not np.any(self.translation))


def _yaw_cos_sin(yaw: float) -> tuple[float, float]:
    """cos/sin with exact values at quarter turns, so lattice-preserving
    rotations map lattice points onto lattice points without float fuzz."""
    quarter = yaw / (np.pi / 2.0)
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0),
                (0.0, -1.0)][int(round(quarter)) % 4]
    return float(np.cos(yaw)), float(np.sin(yaw))


def build_aug_transform(yaw: float, scale: float, flip_x: bool, flip_y: bool,
                        translation: Array, pivot: Array) -> Transform3D:
    """Compose flip -> scale -> rotate about the pivot, then translate."""
    F = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0, 1.0])
    S = np.diag([scale, scale, scale, 1.0])
    c, s = _yaw_cos_sin(yaw)
    R = np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
    L = R @ S @ F
    to_pivot = np.eye(4)
    to_pivot[:3, 3] = -np.asarray(pivot)
    from_pivot = np.eye(4)
    from_pivot[:3, 3] = np.asarray(pivot) + np.asarray(translation)
    return Transform3D(from_pivot @ L @ to_pivot)


def identity_aug() -> AugSample:
    return AugSample(Transform3D.identity(), 0.0, 1.0, False, False,
                     np.zeros(3))


def sample_aug(gen: np.random.Generator, spec: AugSpec,
               grid: VoxelGridSpec) -> AugSample:
    """Draw parameters in a fixed order (yaw, scale, flips, translation) so a
    given generator state always yields the same sample."""
    yaw = float(gen.uniform(-spec.yaw_range, spec.yaw_range))
    scale = float(gen.uniform(spec.scale_range[0], spec.scale_range[1]))
    flip_x = bool(gen.uniform() < spec.flip_x_prob)
    flip_y = bool(gen.uniform() < spec.flip_y_prob)
    tr = np.array([gen.uniform(-t, t) if t > 0 else 0.0
                   for t in spec.trans_range])
    if yaw == 0.0 and scale == 1.0 and not flip_x and not flip_y \
            and not np.any(tr):
        return identity_aug()
    m = build_aug_transform(yaw, scale, flip_x, flip_y, tr, grid.center)
    return AugSample(m, yaw, scale, flip_x, flip_y, tr)


def transform_boxes(boxes: list[Box3D], aug: AugSample) -> list[Box3D]:
    """Map centers through the matrix; adjust sizes, yaw and velocities to
    the flip/scale/rotation parameters so corner sets transform exactly."""
    out = []
    lin2 = aug.transform.M[:2, :2]
    for b in boxes:
        center = aug.transform.apply(b.center)
        yaw = b.yaw
        if aug.flip_x:
            yaw = np.pi - yaw
        if aug.flip_y:
            yaw = -yaw
        yaw = wrap_angle(yaw + aug.yaw)
        vel = lin2 @ b.velocity
        out.append(Box3D(center=center, size=b.size * abs(aug.scale),
                         yaw=float(yaw), velocity=vel, class_id=b.class_id,
                         score=b.score))
    return out


def warp_indices(grid: VoxelGridSpec, aug: AugSample,
                 indices: Array) -> Array:
    """Continuous augmented-volume indices for original-lattice indices.

    index -> cell-center coordinate -> transform -> back to index, i.e. the
    affine P_ci . M . P_ic applied to (..., 3) index arrays.
    """
    A = (grid.coord_to_index_matrix() @ aug.transform.M
         @ grid.index_to_coord_matrix())
    return apply_homogeneous(A, np.asarray(indices, dtype=np.float64))


def warp_label_indices(grid: VoxelGridSpec, aug: AugSample) -> Array:
    """(X, Y, Z, 3) continuous indices into the augmented feature volume."""
    X, Y, Z = grid.dims
    ix, iy, iz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z),
                             indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
    return warp_indices(grid, aug, idx)


def resample_features(f_aug: Array, idx_aug: Array, mode: str = "trilinear"):
    """Pull augmented-space features back onto the original lattice.

    f_aug: (C, X, Y, Z); idx_aug: (X, Y, Z, 3) continuous indices.  The mask
    marks cells whose sample point lies fully inside [0, dim-1] on every
    axis.  "nearest" rounds indices (exact for lattice-preserving
    transforms); "trilinear" interpolates and is differentiable.

    Returns (f_org, mask (X, Y, Z) uint8, vjp); vjp(d_f_org) -> d_f_aug.
    """
    C, X, Y, Z = f_aug.shape
    pts = idx_aug.reshape(-1, 3)
    if mode == "nearest":
        dims = np.array([X, Y, Z])
        valid = np.all((pts >= 0) & (pts <= dims - 1), axis=1)
        near = np.clip(np.round(pts).astype(np.int64), 0, dims - 1)
        flat = f_aug.reshape(C, -1)
        lin = (near[:, 0] * Y + near[:, 1]) * Z + near[:, 2]
        out = flat[:, lin] * valid

        def vjp_nearest(d_out: Array):
            d_flat = np.zeros((X * Y * Z, C), dtype=f_aug.dtype)
            np.add.at(d_flat, lin, (d_out.reshape(C, -1) * valid).T)
            return d_flat.T.reshape(C, X, Y, Z)

        return (out.reshape(C, X, Y, Z),
                valid.reshape(X, Y, Z).astype(np.uint8), vjp_nearest)
    if mode != "trilinear":
        raise ValueError(f"unknown mode {mode!r}")
    sampled, valid, s_vjp = trilinear_sample_3d(f_aug, pts)

    def vjp(d_out: Array):
        d_vol, _ = s_vjp(d_out.reshape(f_aug.shape[0], -1))
        return d_vol

    return (sampled.reshape(C, X, Y, Z),
            valid.reshape(X, Y, Z).astype(np.uint8), vjp)


def masked_occupancy_loss(logits: Array, occ: OccupancyGrid,
                          weights: LossWeights, mask: Array | None):
    """Occupancy loss restricted to in-range cells of the augmentation mask."""
    return occupancy_loss(logits, occ, weights, mask=mask)
