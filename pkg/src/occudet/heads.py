"""Task heads: per-voxel occupancy classifier, center-based BEV detection
head, box encoding/decoding, and point-query class readout."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import VoxelGridSpec
from .ops import Array, conv2d, dense, ensure_finite, relu, sigmoid
from .sampling import trilinear_sample_3d

SENTINEL_CLASS = -1


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    out = np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi)
    return -(out - np.pi)


@dataclass
class Box3D:
    center: Array
    size: Array                   # (l, w, h), meters
    yaw: float
    velocity: Array = field(default_factory=lambda: np.zeros(2))
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        if np.any(self.size <= 0):
            raise ValueError("box sizes must be positive")
        self.yaw = float(wrap_angle(self.yaw))

    def corners(self) -> Array:
        """(8, 3) world-frame corners."""
        l, w, h = self.size
        sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (l / 2)
        sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (w / 2)
        sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (h / 2)
        local = np.stack([sx, sy, sz], axis=1)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        return local @ R.T + self.center

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(),
                "yaw": self.yaw, "velocity": self.velocity.tolist(),
                "class": int(self.class_id), "score": float(self.score)}

    @staticmethod
    def from_dict(d: dict) -> "Box3D":
        return Box3D(center=d["center"], size=d["size"], yaw=d["yaw"],
                     velocity=d["velocity"], class_id=d["class"],
                     score=d["score"])


@dataclass
class OccupancyGrid:
    """Per-voxel class ids over (X, Y, Z); 0 means free."""

    labels: Array
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.min(initial=0) < 0 or \
                self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of class range")


def occ_head_forward(v: Array, w1: Array, b1: Array, w2: Array, b2: Array):
    """Pointwise two-layer MLP over voxel features: (C, X, Y, Z) -> (K, X, Y, Z)."""
    C, X, Y, Z = v.shape
    flat = v.reshape(C, -1).T
    h, d1_vjp = dense(flat, w1, b1)
    hr, r_vjp = relu(h)
    logits, d2_vjp = dense(hr, w2, b2)
    out = logits.T.reshape(-1, X, Y, Z)
    ensure_finite("occ_head_forward", out)

    def vjp(d_out: Array):
        d_logits = d_out.reshape(d_out.shape[0], -1).T
        d_hr, d_w2, d_b2 = d2_vjp(d_logits)
        (d_h,) = r_vjp(d_hr)
        d_flat, d_w1, d_b1 = d1_vjp(d_h)
        d_v = d_flat.T.reshape(C, X, Y, Z)
        return d_v, d_w1, d_b1, d_w2, d_b2

    return out, vjp


def det_head_forward(bev: Array, w_hm: Array, b_hm: Array,
                     w_reg: Array, b_reg: Array):
    """Sigmoid class heatmap + raw regression maps from BEV features.

    Regression channels: dx, dy, z, log l, log w, log h, sin yaw, cos yaw,
    vx, vy.
    """
    hm_logits, hm_vjp = conv2d(bev[None], w_hm, b_hm)
    hm, sig_vjp = sigmoid(hm_logits[0])
    reg, reg_vjp = conv2d(bev[None], w_reg, b_reg)
    reg = reg[0]
    ensure_finite("det_head_forward", hm)

    def vjp(d_hm: Array, d_reg: Array):
        (d_hml,) = sig_vjp(d_hm)
        d_bev1, d_whm, d_bhm = hm_vjp(d_hml[None])
        d_bev2, d_wreg, d_breg = reg_vjp(d_reg[None])
        return d_bev1[0] + d_bev2[0], d_whm, d_bhm, d_wreg, d_breg

    return (hm, reg), vjp


def gaussian_heatmap_value(d2: Array, sigma: float) -> Array:
    return np.exp(-d2 / (2.0 * sigma * sigma))


def encode_detection_targets(boxes: list[Box3D], grid: VoxelGridSpec,
                             num_det_classes: int, radius: float = 1.0,
                             sigma: float = 0.5):
    """Build heatmap/regression targets on the BEV grid.

    Heatmap: per class, a Gaussian bump truncated strictly inside `radius`
    cells of the center cell (at the default radius 1 this is exactly the
    one-hot center).  Regression targets live at the center cell.  Boxes
    whose center cell is off-grid are skipped and counted.

    Returns (hm (K, X, Y), reg (10, X, Y), centers list[(class, ix, iy)],
    skipped count).
    """
    X, Y, _ = grid.dims
    hm = np.zeros((num_det_classes, X, Y), dtype=np.float32)
    reg = np.zeros((10, X, Y), dtype=np.float32)
    centers: list[tuple[int, int, int]] = []
    skipped = 0
    r = int(np.ceil(radius)) - 1
    for box in boxes:
        cont = grid.coord_to_index(box.center)
        ix = int(np.floor(cont[0] + 0.5))
        iy = int(np.floor(cont[1] + 0.5))
        if not (0 <= ix < X and 0 <= iy < Y):
            skipped += 1
            continue
        k = int(box.class_id)
        for ox in range(-r, r + 1):
            for oy in range(-r, r + 1):
                d2 = ox * ox + oy * oy
                if d2 >= radius * radius and d2 > 0:
                    continue
                jx, jy = ix + ox, iy + oy
                if 0 <= jx < X and 0 <= jy < Y:
                    val = gaussian_heatmap_value(np.float32(d2), sigma)
                    hm[k, jx, jy] = max(hm[k, jx, jy], val)
        hm[k, ix, iy] = 1.0
        cell_center = grid.index_to_coord(np.array([ix, iy, 0]))
        reg[0, ix, iy] = (box.center[0] - cell_center[0]) / grid.voxel_size[0]
        reg[1, ix, iy] = (box.center[1] - cell_center[1]) / grid.voxel_size[1]
        reg[2, ix, iy] = box.center[2]
        reg[3:6, ix, iy] = np.log(box.size)
        reg[6, ix, iy] = np.sin(box.yaw)
        reg[7, ix, iy] = np.cos(box.yaw)
        reg[8:10, ix, iy] = box.velocity
        centers.append((k, ix, iy))
    return hm, reg, centers, skipped


def decode_boxes(heatmap: Array, regmap: Array, grid: VoxelGridSpec,
                 score_thresh: float = 0.1, top_k: int = 32) -> list[Box3D]:
    """Decode boxes at 3x3-local-max heatmap peaks.

    Peaks are ranked by score descending; equal scores break ties toward the
    lowest (y, x) cell, then lowest class id.  Empty output is fine.
    """
    K, X, Y = heatmap.shape
    pad = np.pad(heatmap, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    is_peak = np.ones_like(heatmap, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            is_peak &= heatmap >= pad[:, 1 + dx:1 + dx + X, 1 + dy:1 + dy + Y]
    ks, xs, ys = np.nonzero(is_peak & (heatmap >= score_thresh))
    scores = heatmap[ks, xs, ys]
    order = sorted(range(len(ks)),
                   key=lambda i: (-scores[i], ys[i], xs[i], ks[i]))
    boxes: list[Box3D] = []
    for i in order[:top_k]:
        k, ix, iy = int(ks[i]), int(xs[i]), int(ys[i])
        cell = grid.index_to_coord(np.array([ix, iy, 0]))
        r = regmap[:, ix, iy].astype(np.float64)
        center = np.array([cell[0] + r[0] * grid.voxel_size[0],
                           cell[1] + r[1] * grid.voxel_size[1],
                           r[2]])
        boxes.append(Box3D(center=center, size=np.exp(r[3:6]),
                           yaw=float(np.arctan2(r[6], r[7])),
                           velocity=r[8:10], class_id=k,
                           score=float(scores[i])))
    return boxes


def query_point_classes(logits: Array, points: Array, grid: VoxelGridSpec,
                        sentinel: int = SENTINEL_CLASS) -> Array:
    """Class readout at arbitrary world points via trilinear logit sampling.

    Points whose continuous index leaves the cell-center lattice get the
    sentinel class.
    """
    idx = grid.coord_to_index(np.asarray(points, dtype=np.float64))
    sampled, valid, _ = trilinear_sample_3d(logits.astype(np.float64), idx)
    cls = sampled.argmax(axis=0)
    return np.where(valid, cls, sentinel).astype(np.int64)


def boxes_to_json(boxes: list[Box3D]) -> list[dict]:
    return [b.to_dict() for b in boxes]


def boxes_from_json(items: list[dict]) -> list[Box3D]:
    return [Box3D.from_dict(d) for d in items]
