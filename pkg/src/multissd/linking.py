"""Online linking of per-frame detections into class-specific action tubes."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxops import iou
from .core import ActionTube, BoundingBox, Detection, TubeElement, ValidationError


@dataclass(frozen=True)
class LinkParams:
    overlap_weight: float = 1.0  # weight of IoU against detection score in the matching objective
    link_iou: float = 0.1
    max_misses: int = 5
    min_length: int = 8
    min_score: float = 0.0  # detections below this never touch the linker

    def __post_init__(self):
        if self.overlap_weight < 0 or not 0 <= self.link_iou <= 1 or not 0 <= self.min_score <= 1:
            raise ValidationError(f"invalid link parameters {self}")
        if self.max_misses < 0 or self.min_length < 1:
            raise ValidationError(f"invalid link parameters {self}")


@dataclass
class ActiveTube:
    """A tube under construction; holds only matched frames (gaps allowed)."""

    video_id: str
    class_id: int
    index: int
    frames: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    misses: int = 0
    alive: bool = True

    @property
    def tube_score(self) -> float:
        return float(np.mean(self.scores))

    @property
    def last_box(self) -> BoundingBox:
        return self.boxes[-1]

    def add(self, t: int, det: Detection) -> None:
        self.frames.append(t)
        self.boxes.append(det.box)
        self.scores.append(det.score)
        self.misses = 0


def link_objective(tube: ActiveTube, det: Detection, params: LinkParams) -> float:
    return det.score + params.overlap_weight * iou(tube.last_box, det.box)


def link_step(tubes: list[ActiveTube], frame_dets: Sequence[Detection], t: int,
              params: LinkParams = LinkParams(), video_id: str = "") -> list[ActiveTube]:
    """Advance every tube by one frame using the detections of frame ``t`` only.

    Alive tubes claim detections in descending tube-score order (creation
    index breaks ties). A tube takes the unclaimed same-class detection that
    maximizes ``score + overlap_weight * IoU`` among those with
    ``IoU >= link_iou``. Leftover detections start new tubes; a tube missing
    more than ``max_misses`` consecutive frames is terminated. Detections
    scoring below ``min_score`` are ignored.
    """
    if params.min_score > 0:
        frame_dets = [d for d in frame_dets if d.score >= params.min_score]
    claimed = [False] * len(frame_dets)
    alive = sorted((tb for tb in tubes if tb.alive), key=lambda tb: (-tb.tube_score, tb.index))
    for tube in alive:
        best, best_j = -np.inf, -1
        for j, det in enumerate(frame_dets):
            if claimed[j] or det.class_id != tube.class_id:
                continue
            if iou(tube.last_box, det.box) < params.link_iou:
                continue
            value = link_objective(tube, det, params)
            if value > best:
                best, best_j = value, j
        if best_j >= 0:
            claimed[best_j] = True
            tube.add(t, frame_dets[best_j])
        else:
            tube.misses += 1
            if tube.misses > params.max_misses:
                tube.alive = False
    out = list(tubes)
    next_index = max((tb.index for tb in tubes), default=-1) + 1
    for j, det in enumerate(frame_dets):
        if claimed[j]:
            continue
        tube = ActiveTube(video_id, det.class_id, next_index)
        next_index += 1
        tube.add(t, det)
        out.append(tube)
    return out


def _fill_gaps(tube: ActiveTube) -> list[TubeElement]:
    elements = [TubeElement(tube.frames[0], tube.boxes[0], tube.scores[0])]
    for k in range(1, len(tube.frames)):
        t0, t1 = tube.frames[k - 1], tube.frames[k]
        a, b = np.array(tube.boxes[k - 1].as_tuple()), np.array(tube.boxes[k].as_tuple())
        s0, s1 = tube.scores[k - 1], tube.scores[k]
        for t in range(t0 + 1, t1):
            w = (t - t0) / (t1 - t0)
            elements.append(TubeElement(t, BoundingBox(*((1 - w) * a + w * b).tolist()),
                                        (1 - w) * s0 + w * s1))
        elements.append(TubeElement(t1, tube.boxes[k], s1))
    return elements


def finalize_tubes(tubes: Sequence[ActiveTube], min_length: int = 8) -> list[ActionTube]:
    """Interpolate internal gaps, drop tubes spanning fewer than ``min_length`` frames."""
    out = []
    for tube in sorted(tubes, key=lambda tb: tb.index):
        if not tube.frames:
            continue
        elements = _fill_gaps(tube)
        if len(elements) < min_length:
            continue
        out.append(ActionTube.build(tube.video_id, tube.class_id, elements))
    return out


def link_video(dets_by_frame: Mapping[int, Sequence[Detection]], num_frames: int,
               params: LinkParams = LinkParams(), video_id: str = "") -> list[ActionTube]:
    tubes: list[ActiveTube] = []
    for t in range(num_frames):
        tubes = link_step(tubes, list(dets_by_frame.get(t, ())), t, params, video_id)
    return finalize_tubes(tubes, params.min_length)


def link_all(dets: Mapping[tuple, Sequence[Detection]], num_frames: Mapping[str, int],
             params: LinkParams = LinkParams()) -> list[ActionTube]:
    """Link every video in a ``{(video, frame): detections}`` mapping."""
    per_video: dict = defaultdict(dict)
    for (vid, t), ds in dets.items():
        per_video[vid][t] = ds
    tubes = []
    for vid in sorted(num_frames):
        tubes.extend(link_video(per_video.get(vid, {}), num_frames[vid], params, vid))
    return tubes
