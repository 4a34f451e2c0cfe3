"""Late fusion of an appearance stream with motion streams.

Corresponding boxes are the same anchor index: every stream built from one
anchor configuration predicts over an identical lattice, so fusion happens
before decoding and NMS.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ClipTensor, Detection, ValidationError
from .detector import RawPrediction, StreamModel, detect_prediction, predict


def late_fuse(appearance: RawPrediction, motions: Sequence[RawPrediction]) -> RawPrediction:
    """Keep the appearance offsets; average score rows over all n+1 streams."""
    for m in motions:
        if m.scores.shape != appearance.scores.shape:
            raise ValidationError(
                f"anchor grid mismatch: appearance {appearance.scores.shape} vs motion {m.scores.shape}")
    if not motions:
        return appearance
    stacked = np.stack([appearance.scores] + [m.scores for m in motions])
    # sorted streams make the result independent of motion order; offsetting from the
    # smallest value keeps the mean of identical rows exact
    srt = np.sort(stacked, axis=0)
    base = srt[0]
    fused = base + (srt - base).sum(axis=0) / len(srt)
    return RawPrediction(appearance.offsets, fused)


def check_compatible(appearance_model: StreamModel, motion_models: Sequence[StreamModel]) -> None:
    for m in motion_models:
        if m.fingerprint != appearance_model.fingerprint:
            raise ValidationError(
                f"{m.kind} stream anchor fingerprint {m.fingerprint} differs from "
                f"appearance {appearance_model.kind} fingerprint {appearance_model.fingerprint}")


def fuse_and_detect(appearance_model: StreamModel, motion_models: Sequence[StreamModel],
                    inputs: Sequence[ClipTensor], conf_threshold: float = 0.01,
                    nms_iou: float = 0.45, top_k: int = 200) -> list[Detection]:
    """Predict every stream, then fuse and decode with the appearance anchors.

    ``inputs`` lists one clip per stream, appearance first.
    """
    check_compatible(appearance_model, motion_models)
    models = [appearance_model, *motion_models]
    if len(inputs) != len(models):
        raise ValidationError(f"expected {len(models)} stream inputs, got {len(inputs)}")
    preds = [predict(m, x) for m, x in zip(models, inputs)]
    fused = late_fuse(preds[0], preds[1:])
    return detect_prediction(fused, appearance_model.grid, conf_threshold, nms_iou, top_k)
