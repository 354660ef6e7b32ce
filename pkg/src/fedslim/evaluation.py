"""Detection metrics: IoU, greedy NMS, and mAP at a fixed IoU threshold.

Average precision uses all-point interpolation (the precision envelope) with
greedy one-to-one matching: detections are visited in descending score order
and each consumes the highest-IoU unmatched ground truth of its class, if
that IoU clears the threshold. mAP averages per-class AP over the classes
present in the ground truth, on a 0..100 scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .detection import DetectionBox, GridTarget, LossConfig, decode, yolo_loss
from .model import ModelParams, forward

log = logging.getLogger(__name__)

Box = tuple[float, float, float, float]
GroundTruth = tuple[int, int, Box]  # image_index, class_id, corners


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two corner boxes; degenerate boxes give 0."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def nms(boxes: list[DetectionBox], iou_threshold: float) -> list[DetectionBox]:
    """Greedy per-class suppression, visiting boxes by descending score.

    A box survives iff its IoU with every already-kept box of the same class
    is <= the threshold. Score ties resolve toward the earlier list index.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must be in [0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[DetectionBox] = []
    for i in order:
        box = boxes[i]
        if all(
            other.class_id != box.class_id or iou(other.corners, box.corners) <= iou_threshold
            for other in kept
        ):
            kept.append(box)
    return kept


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]  # 0..100
    map50: float  # 0..100
    pr_curves: dict[int, list[tuple[float, float]]] = field(default_factory=dict)


def average_precision(
    detections: list[tuple[int, DetectionBox]],
    ground_truths: list[GroundTruth],
    iou_threshold: float = 0.5,
) -> EvalResult:
    """Per-class AP and their mean over the classes present in the ground truth."""
    classes = sorted({c for _, c, _ in ground_truths})
    det_classes = {d.class_id for _, d in detections}
    for c in sorted(det_classes - set(classes)):
        log.info("class %d has detections but no ground truths; excluded from mAP", c)

    per_class_ap: dict[int, float] = {}
    pr_curves: dict[int, list[tuple[float, float]]] = {}
    for c in classes:
        gts = [(i, g) for g, (i, cls, _) in enumerate(ground_truths) if cls == c]
        gt_boxes = {g: ground_truths[g][2] for _, g in gts}
        gt_by_image: dict[int, list[int]] = {}
        for img, g in gts:
            gt_by_image.setdefault(img, []).append(g)
        matched: set[int] = set()

        dets = [(img, d) for img, d in detections if d.class_id == c]
        order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
        tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            img, det = dets[i]
            best_iou, best_g = 0.0, None
            for g in gt_by_image.get(img, ()):
                if g in matched:
                    continue
                v = iou(det.corners, gt_boxes[g])
                if v > best_iou:
                    best_iou, best_g = v, g
            if best_g is not None and best_iou >= iou_threshold:
                tp[rank] = 1.0
                matched.add(best_g)

        n_gt = len(gts)
        if len(order) == 0:
            per_class_ap[c] = 0.0
            pr_curves[c] = []
            continue
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(1.0 - tp)
        recall = cum_tp / n_gt
        precision = cum_tp / (cum_tp + cum_fp)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recall, envelope):
            ap += (r - prev_r) * p
            prev_r = r
        per_class_ap[c] = 100.0 * ap
        pr_curves[c] = list(zip(recall.tolist(), precision.tolist()))

    map50 = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalResult(per_class_ap=per_class_ap, map50=map50, pr_curves=pr_curves)


# ---------------------------------------------------------------------------
# whole-model evaluation on a held-out set
# ---------------------------------------------------------------------------


@dataclass
class EvalContext:
    """Cached held-out set plus the decode/NMS hyperparameters."""

    images: np.ndarray
    targets: list[GridTarget]
    ground_truths: list[GroundTruth]
    loss_config: LossConfig
    conf_threshold: float = 0.25
    nms_threshold: float = 0.45
    batch_size: int = 32

    def evaluate(self, params: ModelParams) -> tuple[float, float]:
        """Return (mAP@0.5 on the 0..100 scale, mean detection loss)."""
        n = self.images.shape[0]
        cfg = params.config
        detections: list[tuple[int, DetectionBox]] = []
        loss_total = 0.0
        for start in range(0, n, self.batch_size):
            stop = min(start + self.batch_size, n)
            pred = forward(params, Tensor(self.images[start:stop]), training=False)
            loss = yolo_loss(pred, self.targets[start:stop], self.loss_config)
            loss_total += loss.item() * (stop - start)
            for i in range(stop - start):
                boxes = decode(pred.data[i], self.conf_threshold, cfg)
                for box in nms(boxes, self.nms_threshold):
                    detections.append((start + i, box))
        result = average_precision(detections, self.ground_truths, iou_threshold=0.5)
        return result.map50, loss_total / n
