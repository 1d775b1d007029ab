"""Instance recall over IoU thresholds and the adapted Rand error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyForeground, NoGroundTruth, ShapeMismatch

IOU_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)


@dataclass
class ContingencyTable:
    counts: np.ndarray       # (n_gt, n_pred) pixel counts
    gt_labels: np.ndarray
    pred_labels: np.ndarray

    @property
    def gt_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def pred_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def contingency_table(gt: np.ndarray, pred: np.ndarray, ignore_gt=(), ignore_pred=()):
    gt, pred = np.asarray(gt).ravel(), np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ShapeMismatch("label maps differ in size")
    keep = ~np.isin(gt, ignore_gt) & ~np.isin(pred, ignore_pred)
    gt, pred = gt[keep], pred[keep]
    gl, gi = np.unique(gt, return_inverse=True)
    pl, pi = np.unique(pred, return_inverse=True)
    counts = np.zeros((gl.size, pl.size), dtype=np.int64)
    np.add.at(counts, (gi, pi), 1)
    return ContingencyTable(counts, gl, pl)


def instance_iou_matrix(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """IoU between every non-zero gt label (rows) and pred label (cols), sorted by label."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch("label maps differ in size")
    gl = np.unique(gt[gt != 0])
    pl = np.unique(pred[pred != 0])
    table = contingency_table(gt, pred)
    rows = np.searchsorted(table.gt_labels, gl)
    cols = np.searchsorted(table.pred_labels, pl)
    inter = table.counts[np.ix_(rows, cols)].astype(np.float64)
    area_g = table.gt_sizes[rows].astype(np.float64)
    area_p = table.pred_sizes[cols].astype(np.float64)
    union = area_g[:, None] + area_p[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def greedy_matches(iou: np.ndarray, threshold: float) -> int:
    """Number of one-to-one matches taken greedily by descending IoU, kept if >= threshold."""
    if iou.size == 0:
        return 0
    order = np.argsort(-iou, axis=None, kind="stable")
    used_g, used_p = set(), set()
    n = 0
    for flat in order:
        g, p = divmod(int(flat), iou.shape[1])
        if iou[g, p] < threshold:
            break
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        n += 1
    return n


def recalls_per_threshold(gt, pred, thresholds=IOU_THRESHOLDS) -> np.ndarray:
    iou = instance_iou_matrix(gt, pred)
    if iou.shape[0] == 0:
        raise NoGroundTruth("ground truth contains no instance")
    return np.array([greedy_matches(iou, t) / iou.shape[0] for t in thresholds])


def mean_average_recall(gt: np.ndarray, pred: np.ndarray) -> float:
    return float(np.mean(recalls_per_threshold(gt, pred)))


def adapted_rand_error(gt: np.ndarray, pred: np.ndarray) -> float:
    """``1 - F`` of pixel-pair precision and recall; gt background pixels are ignored."""
    table = contingency_table(gt, pred, ignore_gt=(0,))
    if table.total == 0:
        raise EmptyForeground("ground truth has no foreground pixel")
    c = table.counts.astype(np.float64)
    sum_c2 = float((c * c).sum())
    precision = sum_c2 / float((table.pred_sizes.astype(np.float64) ** 2).sum())
    recall = sum_c2 / float((table.gt_sizes.astype(np.float64) ** 2).sum())
    return 1.0 - 2.0 * precision * recall / (precision + recall)


def evaluate_pair(gt: np.ndarray, pred: np.ndarray) -> dict:
    recalls = recalls_per_threshold(gt, pred)
    return {"mAR": float(recalls.mean()), "ARAND": adapted_rand_error(gt, pred),
            "recalls_per_threshold": [float(r) for r in recalls]}


def evaluation_report(pairs) -> dict:
    """Report over ``(stem, gt, pred)`` triples, averaged per image then over images."""
    per_image = []
    for stem, gt, pred in pairs:
        per_image.append({"stem": stem, **evaluate_pair(gt, pred)})
    agg = {"mAR_mean": float(np.mean([r["mAR"] for r in per_image])) if per_image else 0.0,
           "ARAND_mean": float(np.mean([r["ARAND"] for r in per_image])) if per_image else 0.0}
    return {"per_image": per_image, "aggregate": agg}
