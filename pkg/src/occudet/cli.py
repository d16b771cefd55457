"""Command-line entry point.

Subcommands: synth, train, eval, gradcheck, render.  Exit codes: 0 success,
2 validation failure, 3 non-finite abort.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import report
from .config import ConfigError, PipelineConfig
from .evaluate import evaluate
from .gradsuite import run_suite
from .heads import boxes_to_json, decode_boxes
from .model import run_forward
from .ops import NonFiniteError
from .rng import Rng
from .synth import generate_scene, load_scene, save_scene
from .train import TrainAbort, load_checkpoint, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONFINITE = 3


def _load_config(path: str, seed: int | None) -> PipelineConfig:
    cfg = PipelineConfig.from_json_file(path)
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_synth(args) -> int:
    cfg = _load_config(args.spec, args.seed)
    out = Path(args.out)
    for i in range(args.count):
        rng = Rng(cfg.seed).stream(i)
        scene = generate_scene(rng, cfg.scene_spec())
        dest = out if args.count == 1 else out / f"scene{i:03d}"
        save_scene(dest, scene)
        print(f"wrote scene ({len(scene.boxes)} boxes) -> {dest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    scene = load_scene(args.scene) if args.scene else None
    result = train(cfg, args.out, scene=scene)
    out = Path(args.out)
    report.plot_loss_curves(out / "log.ndjson", out / "loss_curves.png")
    print(f"trained {result.steps} steps: loss "
          f"{result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"checkpoint -> {out / 'checkpoint'}")
    return EXIT_OK


def _scene_dirs(path: Path) -> list[Path]:
    if (path / "scene.json").exists():
        return [path]
    subs = sorted(d for d in path.iterdir()
                  if d.is_dir() and (d / "scene.json").exists())
    if not subs:
        raise ConfigError(f"no scenes under {path}")
    return subs


def cmd_eval(args) -> int:
    params, cfg, _ = load_checkpoint(args.checkpoint)
    scenes = [load_scene(d) for d in _scene_dirs(Path(args.scenes))]
    rep = evaluate(params, cfg, scenes)
    print(rep.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(rep.to_json())
        report.write_metrics_csv(rep, out / "metrics.csv")
        report.plot_metric_bars(rep, out / "metrics.png")
        print(f"report -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    results = run_suite(names=names, seeds=args.seeds)
    if not results:
        print(f"unknown op {args.op!r}", file=sys.stderr)
        return EXIT_VALIDATION
    ok = True
    for name, r in sorted(results.items()):
        status = "ok" if r["ok"] else "FAIL"
        print(f"{name:<32} max_err={r['max_err']:.3e} "
              f"tol={r['tol']:.0e} {status}")
        ok &= r["ok"]
    return EXIT_OK if ok else 1


def cmd_render(args) -> int:
    params, cfg, _ = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out, _ = run_forward(scene, params, cfg, aug=None)
    wrote = []
    if out.occ_logits is not None:
        pred = out.occ_logits.argmax(axis=0)
        img = report.occupancy_slice_image(pred, cfg.num_classes)
        report.write_ppm(out_dir / "occupancy_pred.ppm", img)
        gt = report.occupancy_slice_image(scene.occ.labels, cfg.num_classes)
        report.write_ppm(out_dir / "occupancy_gt.ppm", gt)
        wrote += ["occupancy_pred.ppm", "occupancy_gt.ppm"]
    if out.heatmap is not None:
        report.write_pgm(out_dir / "heatmap.pgm",
                         report.heatmap_image(out.heatmap))
        boxes = decode_boxes(out.heatmap, out.regmap, cfg.grid,
                             score_thresh=cfg.eval.score_thresh,
                             top_k=cfg.eval.top_k)
        img = report.bev_boxes_image(cfg.grid, scene.boxes, boxes)
        report.write_ppm(out_dir / "boxes_bev.ppm", img)
        import json
        (out_dir / "detections.json").write_text(
            json.dumps(boxes_to_json(boxes), indent=2))
        wrote += ["heatmap.pgm", "boxes_bev.ppm", "detections.json"]
    print(f"wrote {', '.join(wrote)} -> {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occudet",
                                 description="camera-to-voxel occupancy + "
                                             "detection pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--spec", required=True, help="config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a synthetic scene")
    p.add_argument("--config", required=True, help="config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scene", default=None,
                   help="scene dir (default: generate from config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", default=None)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("render", help="write PPM/PGM renders for a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainAbort, NonFiniteError) as exc:
        print(f"non-finite abort: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
