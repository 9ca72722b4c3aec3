"""Instance segmentation metrics: aggregated Jaccard index and
instance-level F1 with greedy IoU matching, plus per-image reporting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _pair_counts(gt: np.ndarray, pred: np.ndarray):
    """Intersection matrix between positive instances of two label maps.

    Returns (inter, gt_areas, pred_areas) where inter[i, j] is the pixel
    overlap between the i-th GT id and the j-th prediction id (ascending
    id order).
    """
    gt_ids = np.unique(gt)
    gt_ids = gt_ids[gt_ids > 0]
    pred_ids = np.unique(pred)
    pred_ids = pred_ids[pred_ids > 0]
    n_gt, n_pred = len(gt_ids), len(pred_ids)

    gt_lut = np.zeros(int(gt.max()) + 1 if n_gt else 1, dtype=np.int64)
    gt_lut[gt_ids] = np.arange(1, n_gt + 1)
    pred_lut = np.zeros(int(pred.max()) + 1 if n_pred else 1, dtype=np.int64)
    pred_lut[pred_ids] = np.arange(1, n_pred + 1)
    g = gt_lut[gt.astype(np.int64)]
    p = pred_lut[pred.astype(np.int64)]

    joint = g * (n_pred + 1) + p
    counts = np.bincount(joint.ravel(), minlength=(n_gt + 1) * (n_pred + 1))
    counts = counts.reshape(n_gt + 1, n_pred + 1)
    inter = counts[1:, 1:]
    gt_areas = counts[1:, :].sum(axis=1)
    pred_areas = counts[:, 1:].sum(axis=0)
    return inter, gt_areas, pred_areas


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard index.

    Each GT instance picks the prediction with the highest pairwise
    Jaccard among those it overlaps (ties toward the lower prediction
    id); matched intersections/unions accumulate, GT instances with no
    overlapping prediction and predictions never picked contribute their
    area to the union. Empty GT vs empty prediction is 1.
    """
    if gt.shape != pred.shape:
        raise ValueError(f"grid mismatch: {gt.shape} vs {pred.shape}")
    inter, gt_areas, pred_areas = _pair_counts(gt, pred)
    n_gt, n_pred = len(gt_areas), len(pred_areas)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    c = 0
    u = 0
    used = np.zeros(n_pred, dtype=bool)
    for gi in range(n_gt):
        if n_pred and inter[gi].max() > 0:
            union_row = gt_areas[gi] + pred_areas - inter[gi]
            jac = inter[gi] / union_row
            best = int(np.argmax(jac))
            c += int(inter[gi, best])
            u += int(union_row[best])
            used[best] = True
        else:
            u += int(gt_areas[gi])
    u += int(pred_areas[~used].sum())
    return c / u


def f1_instances(gt: np.ndarray, pred: np.ndarray, iou_threshold: float = 0.5):
    """Instance-level F1 under greedy one-to-one IoU matching.

    Pairs are visited in descending IoU (ties by GT id then prediction
    id) and match when IoU exceeds the threshold. Returns
    (f1, precision, recall); empty vs empty is (1, 1, 1).
    """
    if gt.shape != pred.shape:
        raise ValueError(f"grid mismatch: {gt.shape} vs {pred.shape}")
    inter, gt_areas, pred_areas = _pair_counts(gt, pred)
    n_gt, n_pred = len(gt_areas), len(pred_areas)
    if n_gt == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0

    tp = 0
    if n_gt and n_pred:
        union = gt_areas[:, None] + pred_areas[None, :] - inter
        iou = inter / union
        gi_idx, pi_idx = np.nonzero(iou > iou_threshold)
        order = np.lexsort((pi_idx, gi_idx, -iou[gi_idx, pi_idx]))
        gt_used = np.zeros(n_gt, dtype=bool)
        pred_used = np.zeros(n_pred, dtype=bool)
        for idx in order:
            gi, pi = gi_idx[idx], pi_idx[idx]
            if not gt_used[gi] and not pred_used[pi]:
                gt_used[gi] = True
                pred_used[pi] = True
                tp += 1
    fp = n_pred - tp
    fn = n_gt - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return f1, precision, recall


@dataclass
class ImageMetrics:
    image_id: str
    aji: float
    f1: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    """Per-image metrics plus their arithmetic means."""

    per_image: list[ImageMetrics]
    aggregate: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["spanet-metrics-v1"]
        for row in self.per_image:
            lines.append(
                f"image {row.image_id} aji {100 * row.aji:.2f} f1 {100 * row.f1:.2f} "
                f"precision {100 * row.precision:.2f} recall {100 * row.recall:.2f}"
            )
        agg = self.aggregate
        lines.append(
            f"aggregate aji {100 * agg['aji']:.2f} f1 {100 * agg['f1']:.2f} "
            f"precision {100 * agg['precision']:.2f} recall {100 * agg['recall']:.2f}"
        )
        return "\n".join(lines) + "\n"


def evaluate(pairs, ids=None, iou_threshold: float = 0.5) -> MetricsReport:
    """Per-image AJI/F1 over (gt, pred) label-map pairs, with means."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate needs at least one (gt, pred) pair")
    if ids is None:
        ids = [f"image_{i:03d}" for i in range(len(pairs))]
    rows = []
    for image_id, (gt, pred) in zip(ids, pairs):
        f1, precision, recall = f1_instances(gt, pred, iou_threshold)
        rows.append(ImageMetrics(str(image_id), aji(gt, pred), f1, precision, recall))
    aggregate = {
        "aji": float(np.mean([r.aji for r in rows])),
        "f1": float(np.mean([r.f1 for r in rows])),
        "precision": float(np.mean([r.precision for r in rows])),
        "recall": float(np.mean([r.recall for r in rows])),
    }
    return MetricsReport(per_image=rows, aggregate=aggregate)
