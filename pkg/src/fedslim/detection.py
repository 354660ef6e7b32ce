"""Grid-cell detection targets, the composite training loss, and box decoding.

The prediction tensor is laid out per cell as B blocks of (x, y, w, h, conf)
followed by num_classes shared class probabilities; every component is a
sigmoid output in [0, 1]. x and y are offsets within the cell, w and h are
sizes relative to the full image.

The loss penalizes, per image:
  * squared coordinate errors (with sqrt on w/h) of the responsible box in
    each object cell, where "responsible" is the box with the largest IoU
    against the ground truth (ties broken toward the lowest box index);
  * squared confidence error of responsible boxes against a target of 1
    (optionally the actual IoU);
  * squared confidence of every non-responsible box, weighted by noobj;
  * binary cross-entropy of the class probabilities in object cells.
The weighted sum is averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    clamp_min,
    div,
    getitem,
    log,
    mul,
    sqrt,
    sub,
    tensor_sum,
)

BCE_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    coord: float = 5.0
    cls: float = 1.0
    conf: float = 1.0
    noobj: float = 0.5
    confidence_iou_target: bool = False

    def validate(self) -> None:
        for name in ("coord", "cls", "conf", "noobj"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class GridTarget:
    """Per-cell training target for one image.

    objectness is 1 exactly in cells containing a ground-truth center; boxes
    hold (x, y) cell-relative and (w, h) image-relative coordinates; class
    rows are one-hot.
    """

    objectness: np.ndarray  # (S, S)
    boxes: np.ndarray  # (S, S, 4)
    class_onehot: np.ndarray  # (S, S, num_classes)

    @property
    def grid_size(self) -> int:
        return self.objectness.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_onehot.shape[-1]


@dataclass
class LossDiagnostics:
    sqrt_clamp_count: int = 0


@dataclass(frozen=True)
class DetectionBox:
    """One decoded box: normalized fields plus absolute pixel corners."""

    x: float
    y: float
    w: float
    h: float
    confidence: float
    class_probs: tuple[float, ...]
    class_id: int
    score: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _corner_iou(ax0, ay0, ax1, ay1, bx0, by0, bx1, by1):
    """Vectorized IoU of corner boxes; zero-area unions give 0."""
    ix = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    iy = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _stack_targets(targets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi = np.stack([t.objectness for t in targets]).astype(np.float64)
    boxes = np.stack([t.boxes for t in targets]).astype(np.float64)
    onehot = np.stack([t.class_onehot for t in targets]).astype(np.float64)
    return phi, boxes, onehot


def responsible_boxes(values: np.ndarray, tboxes: np.ndarray, boxes_per_cell: int):
    """Pick the predicted box with highest IoU vs the target in every cell.

    Works on raw prediction values in unit-square coordinates. Returns the
    (N, S, S, B) one-hot responsibility mask and the (N, S, S, B) IoU values.
    Ties take the lowest box index.
    """
    n, s = values.shape[0], values.shape[1]
    b = boxes_per_cell
    cols = np.arange(s).reshape(1, 1, s, 1)
    rows = np.arange(s).reshape(1, s, 1, 1)
    px = values[..., 0 : 5 * b : 5]
    py = values[..., 1 : 5 * b : 5]
    pw = values[..., 2 : 5 * b : 5]
    ph = values[..., 3 : 5 * b : 5]
    cx = (cols + px) / s
    cy = (rows + py) / s
    tx = (cols + tboxes[..., 0:1]) / s
    ty = (rows + tboxes[..., 1:2]) / s
    tw = tboxes[..., 2:3]
    th = tboxes[..., 3:4]
    ious = _corner_iou(
        cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2,
        tx - tw / 2, ty - th / 2, tx + tw / 2, ty + th / 2,
    )
    resp = np.zeros((n, s, s, b))
    idx = np.argmax(ious, axis=-1)
    np.put_along_axis(resp, idx[..., None], 1.0, axis=-1)
    return resp, ious


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy; exact 0 where p equals a 0/1 target."""
    t = Tensor(target)
    pos = mul(t, log(clamp_min(p, BCE_EPS)))
    negv = mul(Tensor(1.0 - target), log(clamp_min(sub(1.0, p), BCE_EPS)))
    return sub(0.0, add(pos, negv))


def yolo_loss(pred: Tensor, targets, cfg: LossConfig, diagnostics: LossDiagnostics | None = None) -> Tensor:
    """Composite detection loss over a batch; returns a scalar graph node."""
    cfg.validate()
    phi, tboxes, onehot = _stack_targets(targets)
    n, s = phi.shape[0], phi.shape[1]
    num_classes = onehot.shape[-1]
    depth = pred.shape[-1]
    b = (depth - num_classes) // 5
    if pred.shape != (n, s, s, 5 * b + num_classes) or b < 1:
        raise ShapeError(
            f"prediction shape {pred.shape} does not match {n} targets with grid {s} "
            f"and {num_classes} classes"
        )

    resp, ious = responsible_boxes(pred.data, tboxes, b)
    resp *= phi[..., None]
    obj_mask = Tensor(resp)
    noobj_mask = Tensor(1.0 - resp)

    px = getitem(pred, (Ellipsis, slice(0, 5 * b, 5)))
    py = getitem(pred, (Ellipsis, slice(1, 5 * b, 5)))
    pw = getitem(pred, (Ellipsis, slice(2, 5 * b, 5)))
    ph = getitem(pred, (Ellipsis, slice(3, 5 * b, 5)))
    pc = getitem(pred, (Ellipsis, slice(4, 5 * b, 5)))
    pcls = getitem(pred, (Ellipsis, slice(5 * b, depth)))

    if diagnostics is not None:
        neg = ((pw.data < 0) & (resp > 0)).sum() + ((ph.data < 0) & (resp > 0)).sum()
        diagnostics.sqrt_clamp_count += int(neg)

    dx = sub(px, Tensor(tboxes[..., 0:1]))
    dy = sub(py, Tensor(tboxes[..., 1:2]))
    dw = sub(sqrt(clamp_min(pw, 0.0)), Tensor(np.sqrt(tboxes[..., 2:3])))
    dh = sub(sqrt(clamp_min(ph, 0.0)), Tensor(np.sqrt(tboxes[..., 3:4])))
    coord = tensor_sum(
        mul(obj_mask, add(add(mul(dx, dx), mul(dy, dy)), add(mul(dw, dw), mul(dh, dh))))
    )

    conf_target = np.clip(ious, 0.0, 1.0) if cfg.confidence_iou_target else np.ones_like(resp)
    dc = sub(pc, Tensor(conf_target))
    conf = tensor_sum(mul(obj_mask, mul(dc, dc)))
    noobj = tensor_sum(mul(noobj_mask, mul(pc, pc)))

    cls = tensor_sum(mul(Tensor(phi[..., None]), _bce(pcls, onehot)))

    total = add(
        add(mul(coord, cfg.coord), mul(cls, cfg.cls)),
        add(mul(conf, cfg.conf), mul(noobj, cfg.noobj)),
    )
    return div(total, float(n))


def decode(pred, conf_threshold: float, config) -> list[DetectionBox]:
    """Decode one image's prediction grid into absolute-coordinate boxes.

    Boxes with confidence below the threshold are dropped; each surviving box
    takes the argmax class with score confidence * max(class_probs).
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"confidence threshold must be in [0, 1], got {conf_threshold}")
    values = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    s = config.grid_size
    b = config.boxes_per_cell
    if values.shape != (s, s, config.head_channels):
        raise ShapeError(
            f"decode expects a ({s}, {s}, {config.head_channels}) grid, got {values.shape}"
        )
    img_h, img_w = config.input_size
    cell_h, cell_w = img_h / s, img_w / s
    out: list[DetectionBox] = []
    for i in range(s):
        for j in range(s):
            cell = values[i, j]
            probs = cell[5 * b :]
            for k in range(b):
                conf = float(cell[5 * k + 4])
                if conf < conf_threshold:
                    continue
                x, y, w, h = (float(v) for v in cell[5 * k : 5 * k + 4])
                cx = (j + x) * cell_w
                cy = (i + y) * cell_h
                bw, bh = w * img_w, h * img_h
                class_id = int(np.argmax(probs))
                out.append(
                    DetectionBox(
                        x=x,
                        y=y,
                        w=w,
                        h=h,
                        confidence=conf,
                        class_probs=tuple(float(p) for p in probs),
                        class_id=class_id,
                        score=conf * float(probs[class_id]),
                        x_min=cx - bw / 2,
                        y_min=cy - bh / 2,
                        x_max=cx + bw / 2,
                        y_max=cy + bh / 2,
                    )
                )
    return out
