"""Multi-scale default boxes and ground-truth matching."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxops import DEFAULT_VARIANCES, encode_array, iou_matrix
from .core import BoundingBox, ValidationError, validate_box


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor lattice description.

    ``scales`` has one entry per level plus a trailing one used for the
    last level's extra box (the geometric mean of neighbouring scales).
    """

    feature_sizes: tuple  # ((h, w), ...)
    scales: tuple
    aspect_ratios: tuple  # per level, e.g. ((1, 2, 0.5), ...)
    extra_box: bool = True
    variances: tuple = DEFAULT_VARIANCES

    def __post_init__(self):
        levels = len(self.feature_sizes)
        if len(self.aspect_ratios) != levels:
            raise ValidationError("aspect_ratios needs one entry per level")
        if len(self.scales) not in (levels, levels + 1):
            raise ValidationError("scales needs one entry per level (plus an optional trailing one)")
        if self.extra_box and len(self.scales) != levels + 1:
            raise ValidationError("extra_box requires levels + 1 scales")

    def boxes_per_cell(self, level: int) -> int:
        return len(self.aspect_ratios[level]) + (1 if self.extra_box else 0)

    def to_dict(self) -> dict:
        return {
            "feature_sizes": [list(map(int, s)) for s in self.feature_sizes],
            "scales": [float(s) for s in self.scales],
            "aspect_ratios": [[float(r) for r in rs] for rs in self.aspect_ratios],
            "extra_box": bool(self.extra_box),
            "variances": [float(v) for v in self.variances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        return cls(
            feature_sizes=tuple(tuple(s) for s in d["feature_sizes"]),
            scales=tuple(d["scales"]),
            aspect_ratios=tuple(tuple(r) for r in d["aspect_ratios"]),
            extra_box=d.get("extra_box", True),
            variances=tuple(d.get("variances", DEFAULT_VARIANCES)),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AnchorGrid:
    levels: tuple  # (feature_h, feature_w, boxes_per_cell)
    flat: np.ndarray = field(repr=False)  # (A, 4) corners
    config: AnchorConfig = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.flat)

    @property
    def flat_boxes(self) -> list[BoundingBox]:
        return [BoundingBox(*row) for row in self.flat.tolist()]

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def generate_anchors(config: AnchorConfig) -> AnchorGrid:
    """Build the flat anchor lattice in (level, cell_y, cell_x, box) order."""
    rows = []
    levels = []
    for k, (fh, fw) in enumerate(config.feature_sizes):
        s = config.scales[k]
        shapes = [(s * math.sqrt(r), s / math.sqrt(r)) for r in config.aspect_ratios[k]]
        if config.extra_box:
            s_extra = math.sqrt(s * config.scales[k + 1])
            shapes.append((s_extra, s_extra))
        levels.append((int(fh), int(fw), len(shapes)))
        for j in range(fh):
            cy = (j + 0.5) / fh
            for i in range(fw):
                cx = (i + 0.5) / fw
                for w, h in shapes:
                    rows.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    flat = np.clip(np.asarray(rows, dtype=np.float64).reshape(-1, 4), 0.0, 1.0)
    flat.setflags(write=False)
    return AnchorGrid(tuple(levels), flat, config)


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor training targets.

    ``labels`` holds score-column indices: 0 is background and action class
    ``c`` maps to ``c + 1``. ``offsets`` rows are meaningful only where
    ``positive`` is set.
    """

    labels: np.ndarray
    offsets: np.ndarray
    positive: np.ndarray
    matched_gt: np.ndarray  # gt index per anchor, -1 for background


def match_targets(grid: AnchorGrid, gt: Sequence, pos_iou: float = 0.5,
                  variances: Sequence[float] | None = None) -> MatchResult:
    """Assign ground-truth boxes to anchors.

    Each gt first claims its best-IoU anchor not already claimed by an
    earlier gt. Remaining anchors with IoU >= ``pos_iou`` to any gt go to the
    highest-IoU gt (ties to the lower gt index).
    """
    if not 0.0 < pos_iou < 1.0:
        raise ValidationError(f"pos_iou must be in (0,1), got {pos_iou}")
    if variances is None:
        variances = grid.config.variances if grid.config is not None else DEFAULT_VARIANCES
    n = len(grid)
    labels = np.zeros(n, dtype=np.int64)
    offsets = np.zeros((n, 4), dtype=np.float64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        return MatchResult(labels, offsets, np.zeros(n, dtype=bool), matched)

    classes = np.array([int(c) for c, _ in gt], dtype=np.int64)
    gt_boxes = np.array([validate_box(b).as_tuple() for _, b in gt], dtype=np.float64)
    if (classes < 0).any():
        raise ValidationError("ground-truth class ids must be >= 0")
    ious = iou_matrix(gt_boxes, grid.flat)  # (G, A)

    # argmax picks the first maximum, i.e. the lower gt index on ties
    best_gt = ious.argmax(axis=0)
    best_iou = ious[best_gt, np.arange(n)]
    matched = np.where(best_iou >= pos_iou, best_gt, -1)

    forced = np.zeros(n, dtype=bool)
    for g in range(len(gt)):
        row = np.where(forced, -1.0, ious[g])
        a = int(row.argmax())
        forced[a] = True
        matched[a] = g

    positive = matched >= 0
    labels[positive] = classes[matched[positive]] + 1
    offsets[positive] = encode_array(grid.flat[positive], gt_boxes[matched[positive]], variances)
    return MatchResult(labels, offsets, positive, matched)


def anchor_count(config: AnchorConfig) -> int:
    return sum(int(h) * int(w) * config.boxes_per_cell(k)
               for k, (h, w) in enumerate(config.feature_sizes))
