"""Pipeline configuration: one JSON document drives synthesis, training,
evaluation and the ablation switches."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augmentation import AugSpec
from .geometry import VoxelGridSpec
from .losses import LossWeights, ScheduleSpec
from .synth import SceneSpec
from .view_transform import DepthBins


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass
class Flags:
    use_implicit: bool = True
    use_global_branch: bool = True
    use_local_branch: bool = True
    use_interaction: bool = True
    use_occ_head: bool = True
    use_det_head: bool = True
    use_aug: bool = True
    use_schedule: bool = True


@dataclass
class OptimizerConfig:
    lr: float = 0.02
    momentum: float = 0.9
    steps: int = 400
    steps_per_epoch: int = 40
    grad_clip: float = 5.0     # global-norm clip; 0 disables


@dataclass
class EvalConfig:
    score_thresh: float = 0.1
    top_k: int = 16
    query_points: int = 1000


@dataclass
class PipelineConfig:
    seed: int = 0
    grid: VoxelGridSpec = field(default_factory=lambda: VoxelGridSpec(
        origin=[-8.0, -8.0, 0.0], voxel_size=[0.5, 0.5, 0.5],
        dims=(32, 32, 8)))
    num_bg_classes: int = 1
    num_fg_classes: int = 3
    objects: tuple[int, int] = (3, 3)
    num_cameras: int = 4
    image_size: tuple[int, int] = (56, 32)
    cam_ring_radius: float = 10.0
    cam_height: float = 2.5
    fov_deg: float = 80.0
    depth_bins: DepthBins = field(default_factory=lambda: DepthBins(0.5, 20.0, 16))
    image_channels: int = 4
    query_channels: int = 4
    encoder_hidden: int = 12
    occ_hidden: int = 32
    dca_blocks: int = 1
    dca_heads: int = 2
    dca_points: int = 4
    dca_ffn: int = 12
    local_scales: int = 2
    global_scales: int = 2
    blocks_per_scale: int = 1
    global_deformable: bool = False
    bev_window: tuple[int, int] = (3, 3)
    voxel_window: tuple[int, int, int] = (3, 3, 3)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec(0.1, 1.0, 5))
    aug: AugSpec = field(default_factory=AugSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    flags: Flags = field(default_factory=Flags)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # ------------------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return 1 + self.num_bg_classes + self.num_fg_classes

    @property
    def voxel_channels(self) -> int:
        c = self.image_channels
        if self.flags.use_implicit:
            c += self.query_channels
        return c

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(grid=self.grid, num_bg_classes=self.num_bg_classes,
                         num_fg_classes=self.num_fg_classes,
                         objects=self.objects, num_cameras=self.num_cameras,
                         image_size=self.image_size,
                         cam_ring_radius=self.cam_ring_radius,
                         cam_height=self.cam_height, fov_deg=self.fov_deg)

    def validate(self) -> None:
        f = self.flags
        if not (f.use_occ_head or f.use_det_head):
            raise ConfigError("at least one head must be enabled")
        if f.use_interaction and not (f.use_local_branch and f.use_global_branch):
            raise ConfigError("interaction requires both branches")
        if self.query_channels % self.dca_heads:
            raise ConfigError("query channels must divide into attention heads")
        X, Y, Z = self.grid.dims
        fl = 2 ** (self.local_scales - 1)
        fg = 2 ** (self.global_scales - 1)
        if f.use_local_branch and (X % fl or Y % fl or Z % fl):
            raise ConfigError("grid dims not divisible for local pyramid")
        if f.use_global_branch and (X % fg or Y % fg):
            raise ConfigError("grid dims not divisible for global pyramid")
        for w in self.bev_window + self.voxel_window:
            if w % 2 != 1:
                raise ConfigError("attention windows must be odd")
        if self.optimizer.steps < 0 or self.optimizer.steps_per_epoch < 1:
            raise ConfigError("bad optimizer step counts")
        if self.dca_blocks < 1:
            raise ConfigError("need at least one query block")
        if self.objects[0] > self.objects[1] or self.objects[0] < 0:
            raise ConfigError("bad object count range")

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "grid": {"origin": self.grid.origin.tolist(),
                     "voxel_size": self.grid.voxel_size.tolist(),
                     "dims": list(self.grid.dims)},
            "scene": {"num_bg_classes": self.num_bg_classes,
                      "num_fg_classes": self.num_fg_classes,
                      "objects": list(self.objects),
                      "num_cameras": self.num_cameras,
                      "image_size": list(self.image_size),
                      "cam_ring_radius": self.cam_ring_radius,
                      "cam_height": self.cam_height,
                      "fov_deg": self.fov_deg},
            "depth_bins": {"d_min": self.depth_bins.d_min,
                           "d_max": self.depth_bins.d_max,
                           "count": self.depth_bins.count},
            "channels": {"image": self.image_channels,
                         "query": self.query_channels,
                         "encoder_hidden": self.encoder_hidden,
                         "occ_hidden": self.occ_hidden},
            "dca": {"blocks": self.dca_blocks, "heads": self.dca_heads,
                    "points": self.dca_points, "ffn": self.dca_ffn},
            "branches": {"local_scales": self.local_scales,
                         "global_scales": self.global_scales,
                         "blocks_per_scale": self.blocks_per_scale,
                         "global_deformable": self.global_deformable},
            "interaction": {"bev_window": list(self.bev_window),
                            "voxel_window": list(self.voxel_window)},
            "loss_weights": asdict(self.loss_weights),
            "schedule": asdict(self.schedule),
            "aug": {"yaw_range_deg": float(np.rad2deg(self.aug.yaw_range)),
                    "scale_range": list(self.aug.scale_range),
                    "flip_x_prob": self.aug.flip_x_prob,
                    "flip_y_prob": self.aug.flip_y_prob,
                    "trans_range": list(self.aug.trans_range)},
            "optimizer": asdict(self.optimizer),
            "flags": asdict(self.flags),
            "eval": asdict(self.eval),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        try:
            if "grid" in d:
                g = d["grid"]
                cfg.grid = VoxelGridSpec(origin=g["origin"],
                                         voxel_size=g["voxel_size"],
                                         dims=tuple(g["dims"]))
            sc = d.get("scene", {})
            cfg.num_bg_classes = sc.get("num_bg_classes", cfg.num_bg_classes)
            cfg.num_fg_classes = sc.get("num_fg_classes", cfg.num_fg_classes)
            cfg.objects = tuple(sc.get("objects", cfg.objects))
            cfg.num_cameras = sc.get("num_cameras", cfg.num_cameras)
            cfg.image_size = tuple(sc.get("image_size", cfg.image_size))
            cfg.cam_ring_radius = sc.get("cam_ring_radius", cfg.cam_ring_radius)
            cfg.cam_height = sc.get("cam_height", cfg.cam_height)
            cfg.fov_deg = sc.get("fov_deg", cfg.fov_deg)
            if "depth_bins" in d:
                db = d["depth_bins"]
                cfg.depth_bins = DepthBins(db["d_min"], db["d_max"], db["count"])
            ch = d.get("channels", {})
            cfg.image_channels = ch.get("image", cfg.image_channels)
            cfg.query_channels = ch.get("query", cfg.query_channels)
            cfg.encoder_hidden = ch.get("encoder_hidden", cfg.encoder_hidden)
            cfg.occ_hidden = ch.get("occ_hidden", cfg.occ_hidden)
            dc = d.get("dca", {})
            cfg.dca_blocks = dc.get("blocks", cfg.dca_blocks)
            cfg.dca_heads = dc.get("heads", cfg.dca_heads)
            cfg.dca_points = dc.get("points", cfg.dca_points)
            cfg.dca_ffn = dc.get("ffn", cfg.dca_ffn)
            br = d.get("branches", {})
            cfg.local_scales = br.get("local_scales", cfg.local_scales)
            cfg.global_scales = br.get("global_scales", cfg.global_scales)
            cfg.blocks_per_scale = br.get("blocks_per_scale",
                                          cfg.blocks_per_scale)
            cfg.global_deformable = br.get("global_deformable",
                                           cfg.global_deformable)
            it = d.get("interaction", {})
            cfg.bev_window = tuple(it.get("bev_window", cfg.bev_window))
            cfg.voxel_window = tuple(it.get("voxel_window", cfg.voxel_window))
            if "loss_weights" in d:
                cfg.loss_weights = LossWeights(**d["loss_weights"])
            if "schedule" in d:
                cfg.schedule = ScheduleSpec(**d["schedule"])
            if "aug" in d:
                a = d["aug"]
                cfg.aug = AugSpec(
                    yaw_range=np.deg2rad(a.get("yaw_range_deg", 22.5)),
                    scale_range=tuple(a.get("scale_range", (0.95, 1.05))),
                    flip_x_prob=a.get("flip_x_prob", 0.5),
                    flip_y_prob=a.get("flip_y_prob", 0.5),
                    trans_range=tuple(a.get("trans_range", (0.5, 0.5, 0.5))))
            if "optimizer" in d:
                cfg.optimizer = OptimizerConfig(**d["optimizer"])
            if "flags" in d:
                cfg.flags = Flags(**d["flags"])
            if "eval" in d:
                cfg.eval = EvalConfig(**d["eval"])
            cfg.seed = d.get("seed", cfg.seed)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config document: {exc}") from exc
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_json_file(path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return PipelineConfig.from_dict(doc)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
