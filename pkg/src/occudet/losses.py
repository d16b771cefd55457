"""Training losses and the progressive loss-weight schedule.

Occupancy: cross-entropy + Lovász-softmax + geometric/semantic affinity
terms, all computed over the (optionally masked) voxel set.  Detection:
penalty-reduced focal loss on the heatmap plus L1 on the regression channels
at ground-truth centers.  Depth: cross-entropy against the one-hot bin of
the rendered depth.  Each loss returns (value, vjp) so callers can scale the
upstream gradient by the active schedule weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import VoxelGridSpec
from .heads import Box3D, OccupancyGrid, encode_detection_targets
from .ops import Array, NonFiniteError, softmax, softmax_vjp_only
from .view_transform import DepthBins

EPS = 1e-12


@dataclass
class LossWeights:
    """Nonnegative multipliers for every loss term."""

    ce: float = 1.0
    lovasz: float = 1.0
    geo: float = 1.0
    sem: float = 1.0
    det_cls: float = 1.0
    det_reg: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")


@dataclass
class ScheduleSpec:
    """Ramp of the task-loss multiplier: V_min up to V_max over N epochs."""

    v_min: float = 0.1
    v_max: float = 1.0
    ramp_epochs: int = 1

    def __post_init__(self):
        if not (0 <= self.v_min <= self.v_max):
            raise ValueError("need 0 <= V_min <= V_max")
        if self.ramp_epochs < 1:
            raise ValueError("ramp epochs must be >= 1")


def schedule_delta(epoch: int, s: ScheduleSpec) -> float:
    """delta = max(V_min, min(V_max, (epoch / N) * V_max)), nondecreasing."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(s.v_min, min(s.v_max, (epoch / s.ramp_epochs) * s.v_max))


def total_loss(l_img: float, l_det: float, l_occ: float, delta: float) -> float:
    """L = L_img + delta * L_det + delta * L_occ."""
    for name, v in (("img", l_img), ("det", l_det), ("occ", l_occ)):
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite {name} loss component")
    return l_img + delta * l_det + delta * l_occ


# ---------------------------------------------------------------------------
# occupancy losses

def cross_entropy(logits: Array, labels: Array):
    """Mean negative log-softmax of the true class.  logits (K, M)."""
    K, M = logits.shape
    shifted = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_probs = shifted - lse
    val = float(-log_probs[labels, np.arange(M)].mean())

    def vjp(up: float = 1.0):
        p = np.exp(log_probs)
        p[labels, np.arange(M)] -= 1.0
        return p * (up / M)

    return val, vjp


def lovasz_grad(fg_sorted: Array) -> Array:
    """Gradient of the Lovász extension of the Jaccard loss, errors sorted
    descending."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_single(probs_c: Array, fg: Array):
    """Lovász-Jaccard surrogate for one class; equals 1 - IoU at 0/1 vertices.

    probs_c: predicted probability of the class per element; fg: 0/1 ground
    truth membership.  The sort permutation is treated as locally constant in
    the backward pass.
    """
    fg = fg.astype(probs_c.dtype)
    errors = np.abs(fg - probs_c)
    perm = np.argsort(-errors, kind="stable")
    grad = lovasz_grad(fg[perm])
    val = float(errors[perm] @ grad)

    def vjp(up: float = 1.0):
        d_err = np.zeros_like(probs_c)
        d_err[perm] = grad * up
        return d_err * (1.0 - 2.0 * fg)

    return val, vjp


def lovasz_softmax(probs: Array, labels: Array):
    """Per-class Lovász terms averaged over the classes present in labels."""
    present = np.unique(labels)
    vals, vjps = [], []
    for c in present:
        v, g = lovasz_single(probs[c], labels == c)
        vals.append(v)
        vjps.append((int(c), g))
    n = len(vals)
    val = float(np.mean(vals)) if n else 0.0

    def vjp(up: float = 1.0):
        d = np.zeros_like(probs)
        for c, g in vjps:
            d[c] = g(up / n)
        return d

    return val, vjp


def _affinity_terms(p: Array, t: Array):
    """-log precision / recall / specificity on soft masses; returns
    (terms, vjp_to_p).  Terms whose denominator is zero are dropped."""
    sp = p.sum()
    st = t.sum()
    inter = (p * t).sum()
    comp = ((1.0 - p) * (1.0 - t)).sum()
    snt = (1.0 - t).sum()
    terms = []
    if sp > 0 and st > 0:
        terms.append(("precision", inter / sp))
        terms.append(("recall", inter / st))
    if snt > 0:
        terms.append(("specificity", comp / snt))
    logs = [-np.log(max(v, EPS)) for _, v in terms]

    def vjp(up_each: float):
        d = np.zeros_like(p)
        for name, v in terms:
            if v <= EPS:
                continue
            gv = -up_each / v
            if name == "precision":
                d += gv * (t * sp - inter) / (sp * sp)
            elif name == "recall":
                d += gv * t / st
            else:
                d += gv * (-(1.0 - t)) / snt
        return d

    return logs, vjp


def geo_scal(probs: Array, labels: Array, free_class: int = 0):
    """Affinity loss on binary occupancy: mean of -log(precision),
    -log(recall), -log(specificity) of the soft occupied mass."""
    p_occ = 1.0 - probs[free_class]
    t_occ = (labels != free_class).astype(probs.dtype)
    logs, term_vjp = _affinity_terms(p_occ, t_occ)
    n = len(logs)
    val = float(np.mean(logs)) if n else 0.0

    def vjp(up: float = 1.0):
        d = np.zeros_like(probs)
        if n:
            d[free_class] = -term_vjp(up / n)
        return d

    return val, vjp


def sem_scal(probs: Array, labels: Array):
    """Per-class affinity loss, averaged over all -log terms of the classes
    present in labels."""
    present = np.unique(labels)
    entries = []
    total_terms = 0
    total_val = 0.0
    for c in present:
        t = (labels == c).astype(probs.dtype)
        logs, term_vjp = _affinity_terms(probs[c], t)
        entries.append((int(c), len(logs), term_vjp))
        total_terms += len(logs)
        total_val += float(np.sum(logs)) if logs else 0.0
    val = total_val / total_terms if total_terms else 0.0

    def vjp(up: float = 1.0):
        d = np.zeros_like(probs)
        if total_terms == 0:
            return d
        for c, nterms, term_vjp in entries:
            if nterms:
                d[c] = term_vjp(up / total_terms)
        return d

    return float(val), vjp


def occupancy_loss(logits: Array, occ: OccupancyGrid, weights: LossWeights,
                   mask: Array | None = None):
    """Weighted sum of CE, Lovász, geometric and semantic affinity terms.

    Masked-out voxels are excluded from every term and every denominator and
    receive exactly zero gradient.  Returns (value, parts, vjp) with
    vjp(up) -> d_logits (full shape).
    """
    K = logits.shape[0]
    labels_flat = occ.labels.reshape(-1)
    logits_flat = logits.reshape(K, -1)
    if mask is not None:
        m = np.asarray(mask).reshape(-1).astype(bool)
        if m.shape[0] != labels_flat.shape[0]:
            raise ValueError("mask shape mismatch")
        sel = np.nonzero(m)[0]
    else:
        sel = np.arange(labels_flat.shape[0])

    parts = {"ce": 0.0, "lovasz": 0.0, "geo": 0.0, "sem": 0.0}
    if sel.size == 0:
        def vjp_zero(up: float = 1.0):
            return np.zeros_like(logits)
        return 0.0, parts, vjp_zero

    lg = logits_flat[:, sel]
    lb = labels_flat[sel]
    ce_val, ce_vjp = cross_entropy(lg, lb)
    probs, _ = softmax(lg, axis=0)
    lov_val, lov_vjp = lovasz_softmax(probs, lb)
    geo_val, geo_vjp = geo_scal(probs, lb)
    sem_val, sem_vjp = sem_scal(probs, lb)
    parts = {"ce": ce_val, "lovasz": lov_val, "geo": geo_val, "sem": sem_val}
    total = (weights.ce * ce_val + weights.lovasz * lov_val
             + weights.geo * geo_val + weights.sem * sem_val)

    def vjp(up: float = 1.0):
        d_sel = ce_vjp(weights.ce * up)
        d_probs = (lov_vjp(weights.lovasz * up) + geo_vjp(weights.geo * up)
                   + sem_vjp(weights.sem * up))
        d_sel = d_sel + softmax_vjp_only(probs, d_probs, axis=0)
        d_full = np.zeros_like(logits_flat)
        d_full[:, sel] = d_sel
        return d_full.reshape(logits.shape)

    return float(total), parts, vjp


# ---------------------------------------------------------------------------
# detection losses

def penalty_reduced_focal(hm: Array, target: Array, alpha: float = 2.0,
                          beta: float = 4.0):
    """CenterNet-style focal loss on a Gaussian heatmap, normalized by the
    number of exact-center (target == 1) cells."""
    eps = 1e-7
    p = np.clip(hm, eps, 1.0 - eps)
    pos = target >= 1.0
    n_pos = max(1, int(pos.sum()))
    pos_term = np.where(pos, (1.0 - p) ** alpha * np.log(p), 0.0)
    neg_term = np.where(~pos,
                        (1.0 - target) ** beta * p ** alpha * np.log(1.0 - p),
                        0.0)
    val = float(-(pos_term.sum() + neg_term.sum()) / n_pos)

    def vjp(up: float = 1.0):
        d_pos = (-alpha * (1.0 - p) ** (alpha - 1) * np.log(p)
                 + (1.0 - p) ** alpha / p)
        d_neg = (1.0 - target) ** beta * (
            alpha * p ** (alpha - 1) * np.log(1.0 - p) - p ** alpha / (1.0 - p))
        d = np.where(pos, d_pos, d_neg)
        d *= (hm > eps) & (hm < 1.0 - eps)  # clip pass-through
        return d * (-up / n_pos)

    return val, vjp


def l1_regression(reg: Array, target: Array, centers: list[tuple[int, int, int]]):
    """Mean absolute error over the 10 regression channels at GT centers."""
    if not centers:
        def vjp_zero(up: float = 1.0):
            return np.zeros_like(reg)
        return 0.0, vjp_zero
    xs = np.array([c[1] for c in centers])
    ys = np.array([c[2] for c in centers])
    diff = reg[:, xs, ys] - target[:, xs, ys]
    n = diff.size
    val = float(np.abs(diff).sum() / n)

    def vjp(up: float = 1.0):
        d = np.zeros_like(reg)
        d[:, xs, ys] = np.sign(diff) * (up / n)
        return d

    return val, vjp


def detection_loss(hm: Array, reg: Array, boxes: list[Box3D],
                   grid: VoxelGridSpec, weights: LossWeights,
                   radius: float = 1.0):
    """Focal + L1 detection loss against encoded box targets.

    Boxes whose center cell is off-grid are skipped; the count is reported.
    Returns (value, parts, skipped, vjp) with vjp(up) -> (d_hm, d_reg).
    """
    num_classes = hm.shape[0]
    hm_t, reg_t, centers, skipped = encode_detection_targets(
        boxes, grid, num_classes, radius=radius)
    cls_val, cls_vjp = penalty_reduced_focal(hm, hm_t.astype(hm.dtype))
    reg_val, reg_vjp = l1_regression(reg, reg_t.astype(reg.dtype), centers)
    total = weights.det_cls * cls_val + weights.det_reg * reg_val
    parts = {"det_cls": cls_val, "det_reg": reg_val}

    def vjp(up: float = 1.0):
        return cls_vjp(weights.det_cls * up), reg_vjp(weights.det_reg * up)

    return float(total), parts, skipped, vjp


# ---------------------------------------------------------------------------
# depth loss

def depth_loss(probs: Array, gt_depth: Array, valid: Array, bins: DepthBins):
    """Cross-entropy between the predicted bin distribution and the one-hot
    bin containing the rendered depth, averaged over valid pixels."""
    N, D, H, W = probs.shape
    bin_idx = bins.bin_of(gt_depth)
    ok = np.asarray(valid, dtype=bool) & (bin_idx >= 0) & (bin_idx < D)
    n = int(ok.sum())
    if n == 0:
        def vjp_zero(up: float = 1.0):
            return np.zeros_like(probs)
        return 0.0, vjp_zero
    ns, hs, ws = np.nonzero(ok)
    p_true = probs[ns, bin_idx[ok], hs, ws]
    val = float(-np.log(np.maximum(p_true, EPS)).mean())

    def vjp(up: float = 1.0):
        d = np.zeros_like(probs)
        d[ns, bin_idx[ok], hs, ws] = -up / (np.maximum(p_true, EPS) * n)
        return d

    return val, vjp
