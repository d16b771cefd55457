"""Procedural ground-truth scenes: labeled voxel grids with boxed objects,
an inward-facing camera ring, and exact per-pixel depth/semantic renders
produced by voxel ray traversal."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import uvtf
from .geometry import CameraModel, VoxelGridSpec
from .heads import Box3D, OccupancyGrid
from .ops import Array
from .rng import Rng, STREAM_SCENE


@dataclass
class SceneSpec:
    grid: VoxelGridSpec
    num_bg_classes: int = 1
    num_fg_classes: int = 3
    objects: tuple[int, int] = (3, 3)          # inclusive count range
    num_cameras: int = 4
    image_size: tuple[int, int] = (56, 32)     # (W, H)
    cam_ring_radius: float = 10.0
    cam_height: float = 2.5
    fov_deg: float = 80.0
    object_length: tuple[float, float] = (1.2, 3.0)
    object_width: tuple[float, float] = (0.8, 2.0)
    object_height: tuple[float, float] = (1.0, 2.5)
    max_speed: float = 2.0

    @property
    def num_classes(self) -> int:
        """free + background + foreground."""
        return 1 + self.num_bg_classes + self.num_fg_classes

    def fg_to_occ_class(self, det_class: int) -> int:
        return 1 + self.num_bg_classes + det_class


@dataclass
class Scene:
    spec: SceneSpec
    occ: OccupancyGrid
    boxes: list[Box3D]
    cams: list[CameraModel]
    depth: Array                    # (N, H, W) float32, 0 where invalid
    semantic: Array                 # (N, H, W) int
    valid: Array                    # (N, H, W) bool
    visible: Array = field(default=None)  # (X, Y, Z) bool, camera coverage

    @property
    def grid(self) -> VoxelGridSpec:
        return self.spec.grid


def make_lookat_camera(position: Array, target: Array, focal: float,
                       image_size: tuple[int, int]) -> CameraModel:
    """Camera at `position` with optical axis through `target`; +y down."""
    W, H = image_size
    z = np.asarray(target, dtype=np.float64) - np.asarray(position)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.asarray(position)
    K = np.array([[focal, 0, (W - 1) / 2.0],
                  [0, focal, (H - 1) / 2.0],
                  [0, 0, 1.0]])
    return CameraModel(K=K, T_wc=T, image_size=image_size)


def camera_ring(spec: SceneSpec) -> list[CameraModel]:
    grid = spec.grid
    center = grid.center
    target = np.array([center[0], center[1],
                       grid.origin[2] + 0.35 * grid.dims[2] * grid.voxel_size[2]])
    W, _ = spec.image_size
    focal = (W / 2.0) / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    cams = []
    for k in range(spec.num_cameras):
        ang = 2.0 * np.pi * k / spec.num_cameras
        pos = np.array([center[0] + spec.cam_ring_radius * np.cos(ang),
                        center[1] + spec.cam_ring_radius * np.sin(ang),
                        spec.cam_height])
        cams.append(make_lookat_camera(pos, target, focal, spec.image_size))
    return cams


def _rasterize_box(box: Box3D, grid: VoxelGridSpec) -> Array:
    """Boolean (X, Y, Z) mask of voxels whose center lies inside the box."""
    centers = grid.cell_centers()
    rel = centers - box.center
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local_x = rel[..., 0] * c + rel[..., 1] * s
    local_y = -rel[..., 0] * s + rel[..., 1] * c
    local_z = rel[..., 2]
    half = box.size / 2.0
    return ((np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1])
            & (np.abs(local_z) <= half[2]))


def generate_scene(rng: Rng, spec: SceneSpec) -> Scene:
    """Flat labeled ground plus non-overlapping random cuboid objects.

    Candidate objects whose voxel footprint intersects an existing object
    (or contains no voxel center) are rejected and redrawn; the draw budget
    scales with the requested count and exhausting it is an error.
    """
    gen = rng.stream(STREAM_SCENE).generator()
    grid = spec.grid
    X, Y, Z = grid.dims
    labels = np.zeros((X, Y, Z), dtype=np.int64)

    # ground layer: bottom voxel sheet, striped over the background classes
    ix = np.arange(X)
    ground_class = 1 + (ix * spec.num_bg_classes) // X
    labels[:, :, 0] = ground_class[:, None]
    ground_top = grid.origin[2] + grid.voxel_size[2]

    n_obj = int(gen.integers(spec.objects[0], spec.objects[1] + 1))
    lo = grid.origin[:2] + 1.0
    hi = grid.origin[:2] + np.asarray(grid.dims[:2]) * grid.voxel_size[:2] - 1.0
    boxes: list[Box3D] = []
    occupied = np.zeros_like(labels, dtype=bool)
    tries = 0
    budget = 60 * max(n_obj, 1)
    while len(boxes) < n_obj:
        if tries >= budget:
            raise ValueError(f"object count {n_obj} infeasible for grid "
                             f"{grid.dims}")
        tries += 1
        cx = float(gen.uniform(lo[0], hi[0]))
        cy = float(gen.uniform(lo[1], hi[1]))
        length = float(gen.uniform(*spec.object_length))
        width = float(gen.uniform(*spec.object_width))
        height = float(gen.uniform(*spec.object_height))
        yaw = float(gen.uniform(-np.pi, np.pi))
        cls = int(gen.integers(0, spec.num_fg_classes))
        vel = gen.uniform(-spec.max_speed, spec.max_speed, size=2)
        box = Box3D(center=np.array([cx, cy, ground_top + height / 2.0]),
                    size=np.array([length, width, height]), yaw=yaw,
                    velocity=vel, class_id=cls)
        mask = _rasterize_box(box, grid)
        mask[:, :, 0] = False  # objects sit on, not in, the ground sheet
        if not mask.any() or (mask & occupied).any():
            continue
        occupied |= mask
        labels[mask] = spec.fg_to_occ_class(cls)
        boxes.append(box)

    occ = OccupancyGrid(labels=labels, num_classes=spec.num_classes)
    cams = camera_ring(spec)
    depth, semantic, valid, visible = render_views(occ, grid, cams,
                                                   spec.image_size)
    return Scene(spec=spec, occ=occ, boxes=boxes, cams=cams, depth=depth,
                 semantic=semantic, valid=valid, visible=visible)


def render_views(occ: OccupancyGrid, grid: VoxelGridSpec,
                 cams: list[CameraModel], image_size: tuple[int, int]):
    """Exact voxel traversal per pixel ray.

    The ray is parameterized by camera-frame z, so the recorded depth of the
    first occupied voxel's entry point is directly the z-depth used by the
    projection model and the depth bins.  Misses are invalid.  Also returns
    the (X, Y, Z) mask of voxels traversed by any ray (camera coverage).
    """
    W, H = image_size
    X, Y, Z = grid.dims
    labels = occ.labels
    dims = np.array([X, Y, Z])
    lo = grid.origin
    hi = grid.origin + dims * grid.voxel_size

    depth = np.zeros((len(cams), H, W), dtype=np.float32)
    semantic = np.zeros((len(cams), H, W), dtype=np.int64)
    valid = np.zeros((len(cams), H, W), dtype=bool)
    visible = np.zeros((X, Y, Z), dtype=bool)

    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64), indexing="xy")
    for ci, cam in enumerate(cams):
        # direction scaled so the ray parameter equals camera-frame z
        dx = (uu - cam.K[0, 2]) / cam.K[0, 0]
        dy = (vv - cam.K[1, 2]) / cam.K[1, 1]
        dirs_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1).reshape(-1, 3)
        R = cam.T_wc[:3, :3]
        w = dirs_cam @ R  # R^T applied row-wise
        o = cam.center

        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) / w
            t1 = (hi - o) / w
        t_near = np.nanmax(np.where(np.isnan(t0), -np.inf,
                                    np.minimum(t0, t1)), axis=1)
        t_far = np.nanmin(np.where(np.isnan(t1), np.inf,
                                   np.maximum(t0, t1)), axis=1)
        zero = w == 0
        inside = (o >= lo) & (o <= hi)
        bad = (zero & ~inside).any(axis=1)
        s = np.maximum(t_near, 1e-9)
        active = (~bad) & (t_far > s)

        p0 = o + s[:, None] * w
        vox = np.clip(np.floor((p0 - lo) / grid.voxel_size).astype(np.int64),
                      0, dims - 1)
        step = np.sign(w).astype(np.int64)
        with np.errstate(divide="ignore"):
            t_delta = np.where(w != 0, grid.voxel_size / np.abs(w), np.inf)
            boundary = lo + (vox + (step > 0)) * grid.voxel_size
            t_max = np.where(w != 0, (boundary - o) / w, np.inf)

        ray_depth = np.zeros(w.shape[0])
        ray_sem = np.zeros(w.shape[0], dtype=np.int64)
        ray_valid = np.zeros(w.shape[0], dtype=bool)
        entry = s.copy()
        for _ in range(int(dims.sum()) * 2 + 4):
            if not active.any():
                break
            ai = np.nonzero(active)[0]
            cur = vox[ai]
            visible[cur[:, 0], cur[:, 1], cur[:, 2]] = True
            lab = labels[cur[:, 0], cur[:, 1], cur[:, 2]]
            hit = lab > 0
            hi_idx = ai[hit]
            ray_depth[hi_idx] = entry[hi_idx]
            ray_sem[hi_idx] = lab[hit]
            ray_valid[hi_idx] = True
            active[hi_idx] = False
            mi = ai[~hit]
            if mi.size == 0:
                continue
            axis = np.argmin(t_max[mi], axis=1)
            entry[mi] = t_max[mi, axis]
            vox[mi, axis] += step[mi, axis]
            out = (vox[mi, axis] < 0) | (vox[mi, axis] >= dims[axis])
            active[mi[out]] = False
            keep = mi[~out]
            t_max[keep, axis[~out]] += t_delta[keep, axis[~out]]

        depth[ci] = ray_depth.reshape(H, W).astype(np.float32)
        semantic[ci] = ray_sem.reshape(H, W)
        valid[ci] = ray_valid.reshape(H, W)
    return depth, semantic, valid, visible


def scene_input_planes(scene: Scene) -> Array:
    """(N, C_in, H, W) network input: one-hot semantics, normalized inverse
    depth, and the validity plane."""
    K = scene.spec.num_classes
    N, H, W = scene.depth.shape
    planes = np.zeros((N, K + 2, H, W), dtype=np.float32)
    for c in range(K):
        planes[:, c] = (scene.semantic == c) & scene.valid
    with np.errstate(divide="ignore"):
        inv = np.where(scene.valid, 1.0 / np.maximum(scene.depth, 1e-6), 0.0)
    planes[:, K] = inv
    planes[:, K + 1] = scene.valid
    return planes


_PALETTE = np.array([
    [0, 0, 0], [90, 90, 90], [120, 80, 40], [0, 150, 255], [255, 80, 80],
    [80, 220, 80], [255, 200, 0], [180, 0, 255], [0, 255, 200],
    [255, 120, 0], [120, 120, 255],
], dtype=np.uint8)


def class_palette(num_classes: int) -> Array:
    reps = int(np.ceil(num_classes / len(_PALETTE)))
    return np.tile(_PALETTE, (reps, 1))[:num_classes]


def save_scene(out_dir: str | Path, scene: Scene) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    uvtf.write_tensor(out / "occupancy.uvtf",
                      scene.occ.labels.astype(np.uint8))
    uvtf.write_tensor(out / "depth.uvtf", scene.depth.astype(np.float32))
    uvtf.write_tensor(out / "semantic.uvtf",
                      scene.semantic.astype(np.uint8))
    uvtf.write_tensor(out / "valid.uvtf", scene.valid.astype(np.uint8))
    uvtf.write_tensor(out / "visible.uvtf", scene.visible.astype(np.uint8))
    spec = scene.spec
    doc = {
        "grid": {"origin": spec.grid.origin.tolist(),
                 "voxel_size": spec.grid.voxel_size.tolist(),
                 "dims": list(spec.grid.dims)},
        "num_bg_classes": spec.num_bg_classes,
        "num_fg_classes": spec.num_fg_classes,
        "image_size": list(spec.image_size),
        "cameras": [{"K": cam.K.reshape(-1).tolist(),
                     "T_wc": cam.T_wc.reshape(-1).tolist(),
                     "image_size": list(cam.image_size)}
                    for cam in scene.cams],
        "boxes": [b.to_dict() for b in scene.boxes],
        "class_palette": class_palette(spec.num_classes).tolist(),
        "occupancy_file": "occupancy.uvtf",
        "renders": {"depth": "depth.uvtf", "semantic": "semantic.uvtf",
                    "valid": "valid.uvtf", "visible": "visible.uvtf"},
    }
    with open(out / "scene.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_scene(scene_dir: str | Path) -> Scene:
    d = Path(scene_dir)
    with open(d / "scene.json") as fh:
        doc = json.load(fh)
    grid = VoxelGridSpec(origin=doc["grid"]["origin"],
                         voxel_size=doc["grid"]["voxel_size"],
                         dims=tuple(doc["grid"]["dims"]))
    spec = SceneSpec(grid=grid, num_bg_classes=doc["num_bg_classes"],
                     num_fg_classes=doc["num_fg_classes"],
                     num_cameras=len(doc["cameras"]),
                     image_size=tuple(doc["image_size"]))
    cams = [CameraModel(K=np.array(c["K"]).reshape(3, 3),
                        T_wc=np.array(c["T_wc"]).reshape(4, 4),
                        image_size=tuple(c["image_size"]))
            for c in doc["cameras"]]
    labels = uvtf.read_tensor(d / doc["occupancy_file"]).astype(np.int64)
    occ = OccupancyGrid(labels=labels, num_classes=spec.num_classes)
    renders = doc["renders"]
    return Scene(
        spec=spec, occ=occ,
        boxes=[Box3D.from_dict(b) for b in doc["boxes"]],
        cams=cams,
        depth=uvtf.read_tensor(d / renders["depth"]).astype(np.float32),
        semantic=uvtf.read_tensor(d / renders["semantic"]).astype(np.int64),
        valid=uvtf.read_tensor(d / renders["valid"]).astype(bool),
        visible=uvtf.read_tensor(d / renders["visible"]).astype(bool),
    )
