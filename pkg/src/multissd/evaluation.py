"""Frame- and video-level mean average precision.

A detection is correct when its class matches and its overlap with a still
unmatched ground-truth instance is strictly greater than the threshold.
Detections are processed in global score order; AP integrates the
all-point interpolated precision envelope (11-point optional).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .boxops import iou
from .core import ActionTube, BoundingBox, Detection


@dataclass
class EvalReport:
    ap: dict  # class_id -> AP
    mean_ap: float
    thresholds: tuple
    num_gt: dict = field(default_factory=dict)
    num_detections: dict = field(default_factory=dict)
    num_matches: dict = field(default_factory=dict)
    level: str = "frame"

    @property
    def label(self) -> str:
        t = self.thresholds
        if len(t) == 1:
            return f"{t[0]:g}"
        return f"{t[0]:g}:{t[-1]:g}"


def average_precision(tp: np.ndarray, num_gt: int, eleven_point: bool = False) -> float:
    """AP from a ranked TP/FP indicator vector."""
    if num_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    if eleven_point:
        return float(np.mean([precision[recall >= r].max() if (recall >= r).any() else 0.0
                              for r in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _greedy_ap(preds: Sequence, gts: Mapping, overlap: Callable, alpha: float,
               eleven_point: bool) -> tuple[float, int]:
    """``preds``: (score, group, item); ``gts``: group -> list of items."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    used = {g: [False] * len(items) for g, items in gts.items()}
    tp = np.zeros(len(preds))
    for rank, i in enumerate(order):
        _, group, item = preds[i]
        cands = gts.get(group, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[group][j]:
                continue
            o = overlap(item, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best > alpha:
            used[group][best_j] = True
            tp[rank] = 1.0
    n_gt = sum(len(v) for v in gts.values())
    return average_precision(tp, n_gt, eleven_point), int(tp.sum())


def frame_ap(dets: Mapping, gt: Mapping, alpha: float = 0.5,
             eleven_point: bool = False, classes: Sequence[int] | None = None) -> EvalReport:
    """Frame-level AP per class.

    ``dets`` maps ``(video, frame)`` to :class:`Detection` lists; ``gt`` maps
    the same keys to ``(class_id, BoundingBox)`` lists. mAP averages over
    classes with at least one ground-truth instance (restricted to
    ``classes`` when given).
    """
    gt_by_class: dict = defaultdict(lambda: defaultdict(list))
    for key, instances in gt.items():
        for cls, box in instances:
            gt_by_class[cls][key].append(box)
    det_by_class: dict = defaultdict(list)
    for key, ds in dets.items():
        for d in ds:
            det_by_class[d.class_id].append((d.score, key, d.box))
    return _report(gt_by_class, det_by_class, iou, alpha, eleven_point, classes, "frame")


def _report(gt_by_class, det_by_class, overlap, alpha, eleven_point, classes, level) -> EvalReport:
    wanted = sorted(c for c, groups in gt_by_class.items() if sum(map(len, groups.values())))
    if classes is not None:
        wanted = [c for c in wanted if c in set(classes)]
    ap, n_gt, n_det, n_match = {}, {}, {}, {}
    for c in wanted:
        preds = det_by_class.get(c, [])
        ap[c], n_match[c] = _greedy_ap(preds, gt_by_class[c], overlap, alpha, eleven_point)
        n_gt[c] = sum(len(v) for v in gt_by_class[c].values())
        n_det[c] = len(preds)
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalReport(ap, mean, (alpha,), n_gt, n_det, n_match, level)


def spatiotemporal_iou(a: ActionTube, b: ActionTube) -> float:
    """Temporal IoU of the frame spans times mean spatial IoU on shared frames."""
    inter_start, inter_end = max(a.start, b.start), min(a.end, b.end)
    if inter_end < inter_start:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start) + 1
    t_iou = (inter_end - inter_start + 1) / union
    boxes_a = {e.frame_index: e.box for e in a.elements}
    boxes_b = {e.frame_index: e.box for e in b.elements}
    shared = [t for t in range(inter_start, inter_end + 1) if t in boxes_a and t in boxes_b]
    if not shared:
        return 0.0
    return t_iou * float(np.mean([iou(boxes_a[t], boxes_b[t]) for t in shared]))


AlphaSpec = Union[float, str, Sequence[float]]


def expand_alpha(spec: AlphaSpec) -> tuple:
    """``0.5`` -> (0.5,); ``"0.5:0.95"`` -> (0.50, 0.55, ..., 0.95)."""
    if isinstance(spec, str):
        if ":" in spec:
            lo, hi = (float(s) for s in spec.split(":"))
            n = int(round((hi - lo) / 0.05)) + 1
            return tuple(round(lo + 0.05 * i, 10) for i in range(n))
        return (float(spec),)
    if isinstance(spec, (int, float)):
        return (float(spec),)
    return tuple(float(a) for a in spec)


def video_ap(pred_tubes: Sequence[ActionTube], gt_tubes: Sequence[ActionTube],
             alphas: Sequence[AlphaSpec] = (0.2, 0.5, "0.5:0.95"),
             eleven_point: bool = False, classes: Sequence[int] | None = None) -> list[EvalReport]:
    """One report per entry of ``alphas``; range entries average over their thresholds."""
    gt_by_class: dict = defaultdict(lambda: defaultdict(list))
    for g in gt_tubes:
        gt_by_class[g.class_id][g.video_id].append(g)
    det_by_class: dict = defaultdict(list)
    for p in pred_tubes:
        det_by_class[p.class_id].append((p.tube_score, p.video_id, p))
    reports = []
    for spec in alphas:
        thresholds = expand_alpha(spec)
        parts = [_report(gt_by_class, det_by_class, spatiotemporal_iou, a, eleven_point, classes, "video")
                 for a in thresholds]
        if len(parts) == 1:
            reports.append(parts[0])
            continue
        ap = {c: float(np.mean([p.ap[c] for p in parts])) for c in parts[0].ap}
        mean = float(np.mean(list(ap.values()))) if ap else 0.0
        reports.append(EvalReport(ap, mean, thresholds, parts[0].num_gt, parts[0].num_detections,
                                  {c: float(np.mean([p.num_matches[c] for p in parts])) for c in ap},
                                  "video"))
    return reports
