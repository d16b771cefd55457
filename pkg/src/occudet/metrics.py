"""Evaluation stack: per-class IoU / mIoU, detection AP with true-positive
error breakdown, and the composite detection score.

Detection follows the public nuScenes conventions: greedy score-descending
matching by BEV center distance at thresholds {0.5, 1, 2, 4} m, AP as the
normalized area of the precision-recall curve above precision 0.1 and recall
0.1, TP errors over matches at the 2 m threshold, worst-case error 1.0 for
classes with no matches, and
NDS = (5 * mAP + sum(1 - min(1, mTP))) / 10.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .heads import Box3D
from .ops import Array

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_ERROR_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
TP_ERROR_NAMES = ("mate", "mase", "maoe", "mave", "maae")


def confusion_matrix(pred: Array, gt: Array, num_classes: int,
                     mask: Array | None = None) -> Array:
    """(K, K) counts, rows = ground truth, cols = prediction."""
    p = np.asarray(pred).reshape(-1)
    g = np.asarray(gt).reshape(-1)
    if p.shape != g.shape:
        raise ValueError("pred/gt shape mismatch")
    if mask is not None:
        m = np.asarray(mask).reshape(-1).astype(bool)
        if m.shape != g.shape:
            raise ValueError("mask shape mismatch")
        p, g = p[m], g[m]
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (g, p), 1)
    return cm


def iou_from_confusion(cm: Array):
    """Per-class IoU = TP / (TP + FP + FN); classes absent from both GT and
    prediction are flagged not-present and excluded from the mean."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.zeros_like(tp)
    iou[present] = tp[present] / denom[present]
    return iou, present


def mean_iou(per_class: Array, present: Array | None = None) -> float:
    """Mean of per-class IoUs over present classes."""
    vals = np.asarray(per_class, dtype=np.float64)
    if present is not None:
        vals = vals[np.asarray(present, dtype=bool)]
    if vals.size == 0:
        return 0.0
    return float(vals.mean())


def confusion_miou(pred: Array, gt: Array, num_classes: int,
                   mask: Array | None = None):
    """Returns (confusion matrix, per-class IoU, mIoU)."""
    cm = confusion_matrix(pred, gt, num_classes, mask)
    iou, present = iou_from_confusion(cm)
    return cm, iou, mean_iou(iou, present)


# ---------------------------------------------------------------------------
# detection metrics

def _bev_dist(a: Box3D, b: Box3D) -> float:
    return float(np.hypot(a.center[0] - b.center[0],
                          a.center[1] - b.center[1]))


def match_detections(preds: list[Box3D], gts: list[Box3D], thresh: float):
    """Greedy matching in score-descending order; each GT matched at most
    once, a prediction matches the closest unmatched GT within thresh.

    Returns (matches list[(pred, gt)], tp_flags aligned with the sorted
    prediction order, sorted predictions).
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    matches: list[tuple[Box3D, Box3D]] = []
    tp_flags: list[bool] = []
    sorted_preds = [preds[i] for i in order]
    for p in sorted_preds:
        best_j = -1
        best_d = thresh
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            d = _bev_dist(p, g)
            if d < best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            matches.append((p, gts[best_j]))
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    return matches, tp_flags, sorted_preds


def ap_from_scored_flags(scores: Array, tp_flags: Array, npos: int) -> float:
    """AP over a pooled, score-sortable TP/FP list (101-point interpolation,
    clipped below recall/precision 0.1 and renormalized)."""
    if npos == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    flags = np.asarray(tp_flags, dtype=bool)[order]
    tp = np.cumsum(flags.astype(np.float64))
    fp = np.cumsum(~flags)
    rec = tp / npos
    prec = tp / (tp + fp)
    rec_interp = np.linspace(0.0, 1.0, 101)
    prec_i = np.interp(rec_interp, rec, prec, right=0.0)
    clipped = prec_i[int(100 * MIN_RECALL) + 1:] - MIN_PRECISION
    clipped[clipped < 0] = 0.0
    return float(min(1.0, clipped.mean() / (1.0 - MIN_PRECISION)))


def average_precision(preds: list[Box3D], gts: list[Box3D],
                      thresh: float) -> float:
    """Normalized area of the PR curve above recall/precision 0.1."""
    if len(gts) == 0 or not preds:
        return 0.0
    _, tp_flags, sorted_preds = match_detections(preds, gts, thresh)
    scores = np.array([p.score for p in sorted_preds])
    return ap_from_scored_flags(scores, np.asarray(tp_flags), len(gts))


def aligned_size_iou(size_a: Array, size_b: Array) -> float:
    """3-D IoU of yaw-and-center-aligned boxes (intersection of co-centered
    axis-aligned boxes)."""
    inter = float(np.prod(np.minimum(size_a, size_b)))
    union = float(np.prod(size_a)) + float(np.prod(size_b)) - inter
    return inter / union


def tp_errors_for_matches(matches: list[tuple[Box3D, Box3D]]):
    """(ate, ase, aoe, ave, aae) means over matches; all 1.0 when empty."""
    if not matches:
        return {"mate": 1.0, "mase": 1.0, "maoe": 1.0, "mave": 1.0,
                "maae": 1.0}
    ate, ase, aoe, ave = [], [], [], []
    for p, g in matches:
        ate.append(_bev_dist(p, g))
        ase.append(1.0 - aligned_size_iou(p.size, g.size))
        diff = abs(float(np.mod(p.yaw - g.yaw + np.pi, 2 * np.pi) - np.pi))
        aoe.append(diff)
        ave.append(float(np.linalg.norm(p.velocity - g.velocity)))
    return {"mate": float(np.mean(ate)), "mase": float(np.mean(ase)),
            "maoe": float(np.mean(aoe)), "mave": float(np.mean(ave)),
            "maae": 0.0}


def detection_ap_and_tp_errors(preds: list[Box3D], gts: list[Box3D],
                               classes: list[int]):
    """Per-class AP over all thresholds plus the five TP-error means.

    Unknown class ids in the inputs raise; classes with no GT and no
    predictions are skipped from the means.  The attribute error is pinned
    to 0 for matched classes (attributes are not modeled) but flows through
    the composite-score arithmetic like any other error.
    """
    return detection_metrics_multi([(preds, gts)], classes)


def detection_metrics_multi(samples: list[tuple[list[Box3D], list[Box3D]]],
                            classes: list[int]):
    """Detection metrics over multiple (preds, gts) samples: matching runs
    per sample, the PR curve pools all predictions by score."""
    known = set(classes)
    for preds, gts in samples:
        for b in preds + gts:
            if b.class_id not in known:
                raise ValueError(f"unknown class id {b.class_id}")
    per_class_ap: dict[int, float] = {}
    per_class_errors: dict[int, dict[str, float]] = {}
    for c in classes:
        npos = 0
        any_pred = False
        aps = []
        all_matches: list[tuple[Box3D, Box3D]] = []
        for t in DIST_THRESHOLDS:
            scores: list[float] = []
            flags: list[bool] = []
            npos = 0
            for preds, gts in samples:
                pc = [b for b in preds if b.class_id == c]
                gc = [b for b in gts if b.class_id == c]
                npos += len(gc)
                if pc:
                    any_pred = True
                matches, tp_flags, sorted_pc = match_detections(pc, gc, t)
                scores.extend(b.score for b in sorted_pc)
                flags.extend(tp_flags)
                if t == TP_ERROR_THRESHOLD:
                    all_matches.extend(matches)
            aps.append(ap_from_scored_flags(np.array(scores),
                                            np.array(flags, dtype=bool),
                                            npos))
        if npos == 0 and not any_pred:
            continue
        per_class_ap[c] = float(np.mean(aps))
        per_class_errors[c] = tp_errors_for_matches(all_matches)
    if per_class_ap:
        m_ap = float(np.mean(list(per_class_ap.values())))
        errors = {k: float(np.mean([e[k] for e in per_class_errors.values()]))
                  for k in TP_ERROR_NAMES}
    else:
        m_ap = 0.0
        errors = {k: 1.0 for k in TP_ERROR_NAMES}
    return per_class_ap, m_ap, errors


def nds_score(m_ap: float, mate: float, mase: float, maoe: float,
              mave: float, maae: float) -> float:
    """(5 * mAP + sum over TP errors of (1 - min(1, err))) / 10."""
    if not (0.0 <= m_ap <= 1.0):
        raise ValueError("mAP must be in [0, 1]")
    errs = (mate, mase, maoe, mave, maae)
    if any(e < 0 for e in errs):
        raise ValueError("TP errors must be >= 0")
    bonus = sum(1.0 - min(1.0, e) for e in errs)
    return (5.0 * m_ap + bonus) / 10.0


# ---------------------------------------------------------------------------
# report container

@dataclass
class MetricReport:
    per_class_iou: dict = field(default_factory=dict)
    miou: float = 0.0
    point_miou: float | None = None
    masked_miou: float | None = None
    per_class_ap: dict = field(default_factory=dict)
    map: float = 0.0
    mate: float = 1.0
    mase: float = 1.0
    maoe: float = 1.0
    mave: float = 1.0
    maae: float = 1.0
    nds: float = 0.0

    def to_json(self) -> str:
        d = {
            "per_class_iou": {str(k): float(v)
                              for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "point_miou": self.point_miou,
            "masked_miou": self.masked_miou,
            "per_class_ap": {str(k): float(v)
                             for k, v in self.per_class_ap.items()},
            "map": self.map,
            "tp_errors": {"mate": self.mate, "mase": self.mase,
                          "maoe": self.maoe, "mave": self.mave,
                          "maae": self.maae},
            "nds": self.nds,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        d = json.loads(text)
        e = d["tp_errors"]
        return MetricReport(
            per_class_iou={int(k): v for k, v in d["per_class_iou"].items()},
            miou=d["miou"], point_miou=d.get("point_miou"),
            masked_miou=d.get("masked_miou"),
            per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
            map=d["map"], mate=e["mate"], mase=e["mase"], maoe=e["maoe"],
            mave=e["mave"], maae=e["maae"], nds=d["nds"])

    def table(self) -> str:
        """Fixed-width summary for the CLI."""
        lines = [f"{'metric':<14}{'value':>10}"]
        lines.append("-" * 24)
        rows = [("miou", self.miou)]
        if self.masked_miou is not None:
            rows.append(("miou[masked]", self.masked_miou))
        if self.point_miou is not None:
            rows.append(("miou[points]", self.point_miou))
        rows += [("map", self.map), ("mate", self.mate), ("mase", self.mase),
                 ("maoe", self.maoe), ("mave", self.mave),
                 ("maae", self.maae), ("nds", self.nds)]
        for name, v in rows:
            lines.append(f"{name:<14}{v:>10.4f}")
        for k in sorted(self.per_class_iou):
            lines.append(f"{'iou[' + str(k) + ']':<14}"
                         f"{self.per_class_iou[k]:>10.4f}")
        return "\n".join(lines)
