"""Box geometry: IoU, anchor offset encoding, greedy NMS.

Scalar helpers take :class:`BoundingBox` values; the ``*_array`` variants work
on ``(N, 4)`` corner arrays and are what the detection pipeline uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, Detection

DEFAULT_VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class OffsetVector:
    d_cx: float
    d_cy: float
    d_w: float
    d_h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_cx, self.d_cy, self.d_w, self.d_h], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N,4)`` and ``(M,4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _center_size(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_array(anchors: np.ndarray, targets: np.ndarray,
                 variances: Sequence[float] = DEFAULT_VARIANCES) -> np.ndarray:
    acx, acy, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    tcx, tcy, tw, th = _center_size(np.asarray(targets, dtype=np.float64))
    v0, v1 = variances
    return np.stack([
        (tcx - acx) / (aw * v0),
        (tcy - acy) / (ah * v0),
        np.log(tw / aw) / v1,
        np.log(th / ah) / v1,
    ], axis=-1)


def decode_array(anchors: np.ndarray, offsets: np.ndarray,
                 variances: Sequence[float] = DEFAULT_VARIANCES,
                 clamp: bool = True) -> np.ndarray:
    """Invert :func:`encode_array`; optionally clamp corners into [0,1]."""
    acx, acy, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    offsets = np.asarray(offsets, dtype=np.float64)
    v0, v1 = variances
    cx = acx + offsets[..., 0] * v0 * aw
    cy = acy + offsets[..., 1] * v0 * ah
    w = aw * np.exp(offsets[..., 2] * v1)
    h = ah * np.exp(offsets[..., 3] * v1)
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if clamp:
        boxes = np.clip(boxes, 0.0, 1.0)
    return boxes


def nondegenerate(boxes: np.ndarray) -> np.ndarray:
    """Mask of boxes with positive width and height."""
    return (boxes[..., 2] > boxes[..., 0]) & (boxes[..., 3] > boxes[..., 1])


def encode_offsets(anchor: BoundingBox, target: BoundingBox,
                   variances: Sequence[float] = DEFAULT_VARIANCES) -> OffsetVector:
    return OffsetVector(*encode_array(anchor.as_array(), target.as_array(), variances).tolist())


def decode_offsets(anchor: BoundingBox, offsets: OffsetVector,
                   variances: Sequence[float] = DEFAULT_VARIANCES) -> Optional[BoundingBox]:
    """Decode ``offsets`` against ``anchor``.

    Returns ``None`` when the clamped box has zero width or height (an empty
    decode); callers drop those.
    """
    box = decode_array(anchor.as_array(), offsets.as_array(), variances)
    if not nondegenerate(box):
        return None
    return BoundingBox(*box.tolist())


def ranking_order(scores: np.ndarray, anchor_ids: Optional[np.ndarray] = None,
                  boxes: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices sorted by score descending, then anchor id, then box coordinates."""
    n = len(scores)
    keys = []
    if boxes is not None:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        keys.extend(boxes[:, i] for i in (3, 2, 1, 0))
    if anchor_ids is not None:
        keys.append(np.asarray(anchor_ids))
    keys.append(-np.asarray(scores, dtype=np.float64))
    if not keys or n == 0:
        return np.arange(n)
    return np.lexsort(keys)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
              top_k: int, anchor_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices in score order."""
    order = ranking_order(scores, anchor_ids, boxes)
    if len(order) == 0 or top_k <= 0:
        return np.zeros(0, dtype=np.int64)
    ious = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        if len(keep) >= top_k:
            break
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45, top_k: int = 200) -> list[Detection]:
    """Greedy per-class non-maximum suppression on :class:`Detection` values."""
    if not dets:
        return []
    classes = {d.class_id for d in dets}
    if len(classes) > 1:
        raise ValueError(f"nms expects a single class, got {sorted(classes)}")
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    ids = np.array([d.anchor_id if d.anchor_id is not None else -1 for d in dets])
    keep = nms_array(boxes, scores, iou_threshold, top_k, ids)
    return [dets[i] for i in keep]
