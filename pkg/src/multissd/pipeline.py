"""End-to-end helpers shared by the CLI and the experiment runner."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import StreamKind
from .data import Dataset, VideoRecord, gt_by_frame
from .detector import (DetectorConfig, OptimizerConfig, RawPrediction, StreamModel,
                       TrainingSet, detect_prediction, predict_batch, train)
from .evaluation import EvalReport, frame_ap, video_ap
from .flow import FileFlowProvider, SyntheticFlowProvider
from .fusion import late_fuse
from .linking import LinkParams, link_all
from .streams import FrameSampler, Recipe, VideoArrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectParams:
    conf_threshold: float = 0.01
    nms_iou: float = 0.45
    top_k: int = 200


def flow_provider(dataset: Dataset, flow_dir: Optional[str] = None):
    if flow_dir:
        return FileFlowProvider(flow_dir, dataset.flow_bound)
    return SyntheticFlowProvider(dataset.root, dataset.flow_bound)


def load_videos(dataset: Dataset, records: Sequence[VideoRecord], with_flow: bool,
                flow_dir: Optional[str] = None) -> list[VideoArrays]:
    provider = flow_provider(dataset, flow_dir) if with_flow else None
    return [VideoArrays.load(dataset, r, provider) for r in records]


def train_stream(kind: StreamKind, config: DetectorConfig, videos: Sequence[VideoArrays],
                 opt: OptimizerConfig, seed: int = 0, history: Optional[list] = None) -> StreamModel:
    model = StreamModel(kind, config, seed=seed)
    sampler = FrameSampler(videos, kind, config.backbone.clip_length)
    data = TrainingSet.build(model.grid, sampler, sampler.gts(), opt.pos_iou)
    return train(model, data, opt, history=history)


def stream_predictions(model: StreamModel, videos: Sequence[VideoArrays],
                       batch_size: int = 32) -> dict[tuple[str, int], RawPrediction]:
    sampler = FrameSampler(videos, model.kind, model.config.backbone.clip_length)
    preds = {}
    keys = sampler.keys()
    for start in range(0, len(sampler), batch_size):
        idx = np.arange(start, min(start + batch_size, len(sampler)))
        for k, p in zip(keys[start:idx[-1] + 1], predict_batch(model, sampler[idx], batch_size)):
            preds[k] = p
    return preds


def fused_detections(preds: Mapping[StreamKind, Mapping], recipe: Recipe, grid,
                     params: DetectParams = DetectParams()) -> dict:
    """Late-fuse per-stream predictions following ``recipe`` and decode every frame."""
    app = preds[recipe.appearance]
    out = {}
    for key, p in app.items():
        fused = late_fuse(p, [preds[m][key] for m in recipe.motions])
        out[key] = detect_prediction(fused, grid, params.conf_threshold, params.nms_iou, params.top_k)
    return out


@dataclass
class ComboResult:
    recipe: str
    frame: EvalReport
    video: list


def evaluate_detections(dets: Mapping, records: Sequence[VideoRecord], link: LinkParams,
                        frame_alpha: float = 0.5, video_alphas=(0.2, 0.5, "0.5:0.95"),
                        classes: Optional[Sequence[int]] = None) -> tuple[EvalReport, list[EvalReport], list]:
    gt = gt_by_frame(records)
    frame = frame_ap(dets, gt, frame_alpha, classes=classes)
    tubes = link_all(dets, {r.video_id: r.num_frames for r in records}, link)
    gt_tubes = [t for r in records for t in r.gt_tubes()]
    video = video_ap(tubes, gt_tubes, video_alphas, classes=classes)
    return frame, video, tubes
