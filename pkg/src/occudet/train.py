"""SGD training loop with progressive loss weighting, per-step augmentation,
newline-delimited JSON logging, and UVTF checkpoint bundles."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import uvtf
from .augmentation import sample_aug, transform_boxes
from .config import ConfigError, PipelineConfig
from .losses import depth_loss, detection_loss, occupancy_loss, schedule_delta, total_loss
from .model import init_params, run_forward, zero_grads
from .ops import NonFiniteError, Param
from .rng import Rng, STREAM_AUG
from .synth import Scene, generate_scene


class TrainAbort(RuntimeError):
    """Non-finite loss encountered; the offending step is in the log."""


@dataclass
class TrainResult:
    out_dir: Path
    scene: Scene
    params: dict[str, Param]
    initial_loss: float
    final_loss: float
    steps: int


def save_checkpoint(ckpt_dir: str | Path, params: dict[str, Param],
                    config: PipelineConfig, step: int) -> None:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        uvtf.write_tensor(out / f"{name}.uvtf",
                          params[name].value.astype(np.float32))
    manifest = {"param_names": names, "step": step,
                "config_hash": config.config_hash(),
                "config": config.to_dict()}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str | Path):
    """Returns (params, config, step)."""
    d = Path(ckpt_dir)
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    config = PipelineConfig.from_dict(manifest["config"])
    params: dict[str, Param] = {}
    for name in manifest["param_names"]:
        value = uvtf.read_tensor(d / f"{name}.uvtf")
        params[name] = Param(name=name, value=value)
    return params, config, manifest["step"]


def compute_losses_and_backward(scene: Scene, params: dict[str, Param],
                                config: PipelineConfig, aug, delta: float,
                                do_backward: bool = True):
    """One forward pass plus loss assembly; optionally seeds the backward.

    Returns (record dict of loss components, ForwardOutputs).
    """
    f = config.flags
    w = config.loss_weights
    out, backward = run_forward(scene, params, config, aug=aug)

    l_depth, depth_vjp = depth_loss(out.depth_probs, scene.depth, scene.valid,
                                    config.depth_bins)
    l_img = w.depth * l_depth

    l_occ = 0.0
    occ_parts = {}
    occ_vjp = None
    if f.use_occ_head:
        l_occ, occ_parts, occ_vjp = occupancy_loss(
            out.occ_logits, scene.occ, w, mask=out.occ_mask)

    l_det = 0.0
    det_parts = {}
    skipped = 0
    det_vjp = None
    if f.use_det_head:
        boxes = scene.boxes if aug is None else transform_boxes(scene.boxes, aug)
        l_det, det_parts, skipped, det_vjp = detection_loss(
            out.heatmap, out.regmap, boxes, config.grid, w)

    total = total_loss(l_img, l_det, l_occ, delta)

    if do_backward:
        seeds = {"d_depth_probs": depth_vjp(w.depth)}
        if occ_vjp is not None:
            seeds["d_occ_logits"] = occ_vjp(delta)
        if det_vjp is not None:
            d_hm, d_reg = det_vjp(delta)
            seeds["d_heatmap"] = d_hm
            seeds["d_regmap"] = d_reg
        backward(**seeds)

    record = {"loss": float(total), "depth": float(l_depth),
              "occ": float(l_occ), "det": float(l_det),
              "skipped_boxes": int(skipped)}
    for k2, v2 in {**occ_parts, **det_parts}.items():
        record[k2] = float(v2)
    return record, out


def clip_gradients(params: dict[str, Param], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params.values():
        sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in params.values():
            p.grad *= scale
    return norm


def sgd_step(params: dict[str, Param], velocity: dict[str, np.ndarray],
             lr: float, momentum: float) -> None:
    for name, p in params.items():
        v = velocity[name]
        v *= momentum
        v -= lr * p.grad
        p.value += v


def train(config: PipelineConfig, out_dir: str | Path,
          scene: Scene | None = None) -> TrainResult:
    """Train on one synthetic scene; artifacts land in out_dir.

    Writes log.ndjson (header + one record per step), a checkpoint bundle,
    and returns the initial/final combined losses from the run's own log.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(config.seed)
    if scene is None:
        scene = generate_scene(rng, config.scene_spec())
    if tuple(scene.grid.dims) != tuple(config.grid.dims):
        raise ConfigError("scene grid does not match config grid")

    params = init_params(config, rng)
    velocity = {n: np.zeros_like(p.value) for n, p in params.items()}
    f = config.flags
    opt = config.optimizer

    log_path = out / "log.ndjson"
    initial = final = float("nan")
    with open(log_path, "w") as log:
        header = {"type": "header", "config_hash": config.config_hash(),
                  "seed": config.seed, "config": config.to_dict()}
        log.write(json.dumps(header, sort_keys=True) + "\n")
        try:
            for step in range(opt.steps):
                epoch = step // opt.steps_per_epoch
                delta = (schedule_delta(epoch, config.schedule)
                         if f.use_schedule else 1.0)
                if f.use_aug:
                    gen = rng.stream(STREAM_AUG).stream(step).generator()
                    aug = sample_aug(gen, config.aug, config.grid)
                else:
                    aug = None
                zero_grads(params)
                record, _ = compute_losses_and_backward(
                    scene, params, config, aug, delta)
                grad_norm = clip_gradients(params, opt.grad_clip)
                sgd_step(params, velocity, opt.lr, opt.momentum)
                entry = {"type": "step", "step": step, "epoch": epoch,
                         "delta": delta, **record,
                         "grad_norm": float(grad_norm),
                         "aug": aug.to_dict() if aug is not None else None}
                log.write(json.dumps(entry, sort_keys=True) + "\n")
                if step == 0:
                    initial = record["loss"]
                final = record["loss"]
        except NonFiniteError as exc:
            log.write(json.dumps({"type": "abort", "error": str(exc)},
                                 sort_keys=True) + "\n")
            raise TrainAbort(str(exc)) from exc

    save_checkpoint(out / "checkpoint", params, config, opt.steps)
    return TrainResult(out_dir=out, scene=scene, params=params,
                       initial_loss=initial, final_loss=final,
                       steps=opt.steps)
