"""Artifact emission: PPM/PGM renders of grids, heatmaps and boxes, plus
matplotlib figures and delimited metric output for the report path."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import VoxelGridSpec  # noqa: E402
from .heads import Box3D  # noqa: E402
from .metrics import MetricReport  # noqa: E402
from .synth import class_palette  # noqa: E402


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6; rgb is (H, W, 3) uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary P5; gray is (H, W) uint8."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def occupancy_slice_image(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Z slices of the label grid laid out left to right, colorized."""
    pal = class_palette(num_classes)
    X, Y, Z = labels.shape
    img = np.zeros((Y, X * Z + (Z - 1), 3), dtype=np.uint8)
    for z in range(Z):
        tile = pal[labels[:, :, z]]            # (X, Y, 3)
        img[:, z * (X + 1):z * (X + 1) + X] = tile.transpose(1, 0, 2)
    return img


def heatmap_image(heatmap: np.ndarray) -> np.ndarray:
    """Max over classes, scaled to uint8 grayscale (X across, Y down)."""
    hm = heatmap.max(axis=0)
    return np.clip(hm * 255.0, 0, 255).astype(np.uint8).T


def _draw_segment(img: np.ndarray, p0, p1, color) -> None:
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])) * 2 + 2)
    ts = np.linspace(0.0, 1.0, n)
    xs = np.round(p0[0] + ts * (p1[0] - p0[0])).astype(int)
    ys = np.round(p0[1] + ts * (p1[1] - p0[1])).astype(int)
    h, w, _ = img.shape
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[ys[ok], xs[ok]] = color


def bev_boxes_image(grid: VoxelGridSpec, gt_boxes: list[Box3D],
                    pred_boxes: list[Box3D], scale: int = 8) -> np.ndarray:
    """Top-down plot: ground-truth boxes green, predictions red."""
    X, Y, _ = grid.dims
    img = np.full((Y * scale, X * scale, 3), 16, dtype=np.uint8)

    def to_px(pt):
        idx = (np.asarray(pt[:2]) - grid.origin[:2]) / grid.voxel_size[:2]
        return idx[0] * scale, idx[1] * scale

    for boxes, color in ((gt_boxes, (60, 220, 60)),
                         (pred_boxes, (230, 60, 60))):
        for b in boxes:
            corners = b.corners()[[0, 2, 6, 4]]   # top face ring
            px = [to_px(c) for c in corners]
            for i in range(4):
                _draw_segment(img, px[i], px[(i + 1) % 4], color)
    return img


def plot_loss_curves(log_path: str | Path, out_png: str | Path) -> None:
    steps, totals, parts = [], [], {}
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") != "step":
                continue
            steps.append(rec["step"])
            totals.append(rec["loss"])
            for key in ("depth", "occ", "det"):
                parts.setdefault(key, []).append(rec.get(key, 0.0))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, totals, label="total", lw=2)
    for key, vals in parts.items():
        ax.plot(steps, vals, label=key, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_metric_bars(report: MetricReport, out_png: str | Path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    if report.per_class_iou:
        ks = sorted(report.per_class_iou)
        ax1.bar([str(k) for k in ks],
                [report.per_class_iou[k] for k in ks], color="tab:blue")
    ax1.set_title(f"per-class IoU (mIoU={report.miou:.3f})")
    ax1.set_ylim(0, 1)
    names = ["mAP", "ATE", "ASE", "AOE", "AVE", "AAE", "NDS"]
    vals = [report.map, report.mate, report.mase, report.maoe, report.mave,
            report.maae, report.nds]
    ax2.bar(names, vals, color="tab:orange")
    ax2.set_title("detection")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def write_metrics_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["miou", report.miou])
        if report.masked_miou is not None:
            writer.writerow(["miou_masked", report.masked_miou])
        if report.point_miou is not None:
            writer.writerow(["miou_points", report.point_miou])
        for k in sorted(report.per_class_iou):
            writer.writerow([f"iou_class_{k}", report.per_class_iou[k]])
        writer.writerow(["map", report.map])
        for name in ("mate", "mase", "maoe", "mave", "maae", "nds"):
            writer.writerow([name, getattr(report, name)])
        for k in sorted(report.per_class_ap):
            writer.writerow([f"ap_class_{k}", report.per_class_ap[k]])
