"""Evaluation: run the trained model on scenes without augmentation and
reduce to a MetricReport (voxel mIoU with and without the camera-visibility
mask, point-query mIoU, and detection AP / TP errors / composite score)."""
from __future__ import annotations

import numpy as np

from .config import ConfigError, PipelineConfig
from .heads import decode_boxes, query_point_classes
from .metrics import (MetricReport, confusion_matrix, detection_metrics_multi,
                      iou_from_confusion, mean_iou, nds_score)
from .model import ForwardOutputs, run_forward
from .ops import Param
from .rng import Rng, STREAM_EVAL
from .synth import Scene


def sample_query_points(scene: Scene, count: int, gen: np.random.Generator):
    """Random points inside the cell-center hull plus their containing-voxel
    labels (the segmentation-style ground truth)."""
    grid = scene.grid
    lo = grid.origin + 0.5 * grid.voxel_size
    hi = grid.origin + (np.asarray(grid.dims) - 0.5) * grid.voxel_size
    pts = gen.uniform(lo, hi, size=(count, 3))
    vox = np.floor((pts - grid.origin) / grid.voxel_size).astype(np.int64)
    vox = np.clip(vox, 0, np.asarray(grid.dims) - 1)
    labels = scene.occ.labels[vox[:, 0], vox[:, 1], vox[:, 2]]
    return pts, labels


def evaluate_outputs(samples: list[tuple[ForwardOutputs, Scene]],
                     config: PipelineConfig) -> MetricReport:
    """Reduce forward outputs on one or more scenes into a MetricReport."""
    k = config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    cm_masked = np.zeros((k, k), dtype=np.int64)
    cm_points = np.zeros((k, k), dtype=np.int64)
    det_samples = []
    have_occ = have_det = False
    gen = Rng(config.seed).stream(STREAM_EVAL).generator()
    for out, scene in samples:
        if out.occ_logits is not None:
            have_occ = True
            pred = out.occ_logits.argmax(axis=0)
            cm += confusion_matrix(pred, scene.occ.labels, k)
            cm_masked += confusion_matrix(pred, scene.occ.labels, k,
                                          mask=scene.visible)
            pts, gt_lab = sample_query_points(scene, config.eval.query_points,
                                              gen)
            pred_lab = query_point_classes(out.occ_logits, pts, config.grid)
            ok = pred_lab >= 0
            cm_points += confusion_matrix(pred_lab[ok], gt_lab[ok], k)
        if out.heatmap is not None:
            have_det = True
            boxes = decode_boxes(out.heatmap, out.regmap, config.grid,
                                 score_thresh=config.eval.score_thresh,
                                 top_k=config.eval.top_k)
            det_samples.append((boxes, scene.boxes))

    report = MetricReport()
    if have_occ:
        iou, present = iou_from_confusion(cm)
        report.per_class_iou = {int(c): float(iou[c])
                                for c in np.nonzero(present)[0]}
        report.miou = mean_iou(iou, present)
        iou_m, present_m = iou_from_confusion(cm_masked)
        report.masked_miou = mean_iou(iou_m, present_m)
        iou_p, present_p = iou_from_confusion(cm_points)
        report.point_miou = mean_iou(iou_p, present_p)
    if have_det:
        classes = list(range(config.num_fg_classes))
        per_class_ap, m_ap, errors = detection_metrics_multi(det_samples,
                                                             classes)
        report.per_class_ap = {int(c): float(v)
                               for c, v in per_class_ap.items()}
        report.map = m_ap
        for name, v in errors.items():
            setattr(report, name, v)
    report.nds = nds_score(report.map, report.mate, report.mase, report.maoe,
                           report.mave, report.maae)
    return report


def evaluate(params: dict[str, Param], config: PipelineConfig,
             scenes: list[Scene]) -> MetricReport:
    """Forward every scene without augmentation and score the predictions."""
    samples = []
    for scene in scenes:
        if tuple(scene.grid.dims) != tuple(config.grid.dims):
            raise ConfigError("scene grid does not match config grid")
        out, _ = run_forward(scene, params, config, aug=None)
        samples.append((out, scene))
    return evaluate_outputs(samples, config)


def gt_as_prediction_outputs(scene: Scene, config: PipelineConfig,
                             margin: float = 10.0) -> ForwardOutputs:
    """Synthesize outputs that reproduce the ground truth exactly; useful for
    checking the metric path end to end."""
    k = config.num_classes
    labels = scene.occ.labels
    logits = np.full((k,) + labels.shape, -margin, dtype=np.float32)
    for c in range(k):
        logits[c][labels == c] = margin
    from .heads import encode_detection_targets  # local import, no cycle
    hm, reg, _, _ = encode_detection_targets(scene.boxes, config.grid,
                                             config.num_fg_classes)
    d = config.depth_bins.count
    n, h, w = scene.depth.shape
    probs = np.full((n, d, h, w), 1.0 / d, dtype=np.float32)
    return ForwardOutputs(depth_probs=probs, occ_logits=logits,
                          occ_mask=None, heatmap=hm, regmap=reg)
