"""Per-stream input assembly and fusion recipe parsing.

For frame ``t`` the four streams see: the RGB frame, the flow image of
``(t-1, t)``, the RGB clip ``t-N+1..t``, and the flow stack over the same
window. Frames before the video start repeat frame 0; flow before frame 1 is
zero flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ClipTensor, Layout, Modality, StreamKind, ValidationError
from .data import Dataset, VideoRecord, read_frames
from .flow import FlowProvider, encode_flow, zero_flow_image


@dataclass(frozen=True)
class Recipe:
    """Late-fusion recipe ``A+M1+...+Mn``: first stream keeps its boxes."""

    appearance: StreamKind
    motions: tuple

    @classmethod
    def parse(cls, text: str) -> "Recipe":
        tokens = [t for t in text.split("+") if t.strip()]
        if not tokens:
            raise ValidationError(f"empty stream combination {text!r}")
        kinds = [StreamKind.parse(t) for t in tokens]
        if len(set(kinds)) != len(kinds):
            raise ValidationError(f"stream listed twice in {text!r}")
        return cls(kinds[0], tuple(kinds[1:]))

    @property
    def streams(self) -> tuple:
        return (self.appearance,) + self.motions

    def __str__(self) -> str:
        return "+".join(k.name for k in self.streams)


class VideoArrays:
    """Decoded RGB frames and encoded flow images for one video, both ``(T,3,H,W)`` float32."""

    def __init__(self, record: VideoRecord, rgb: np.ndarray, flow: np.ndarray | None):
        self.record = record
        self.rgb = rgb
        self.flow = flow

    @classmethod
    def load(cls, dataset: Dataset, record: VideoRecord, provider: FlowProvider | None = None) -> "VideoArrays":
        rgb = read_frames(dataset.video_dir(record)).astype(np.float32) / 255.0
        flow = None
        if provider is not None:
            t, _, h, w = rgb.shape
            flow = np.empty_like(rgb)
            flow[0] = zero_flow_image(h, w)
            for i in range(1, t):
                flow[i] = encode_flow(provider.raw_flow(record.video_id, i), provider.bound)
        return cls(record, rgb, flow)

    def source(self, kind: StreamKind) -> np.ndarray:
        if kind.modality is Modality.RGB:
            return self.rgb
        if self.flow is None:
            raise ValidationError(f"{self.record.video_id}: flow not loaded")
        return self.flow

    def input(self, kind: StreamKind, t: int, clip_length: int) -> np.ndarray:
        src = self.source(kind)
        if not kind.is_3d:
            return src[t]
        idx = np.clip(np.arange(t - clip_length + 1, t + 1), 0, None)
        # flow[0] is the zero-flow image, so clamping pads flow stacks with zero flow too
        return np.ascontiguousarray(src[idx].transpose(1, 0, 2, 3))

    def clip(self, kind: StreamKind, t: int, clip_length: int) -> ClipTensor:
        return ClipTensor(self.input(kind, t, clip_length), Layout.CNHW if kind.is_3d else Layout.CHW)


class FrameSampler:
    """Lazy stacked inputs over ``(video, frame)`` pairs; indexable with integer arrays."""

    def __init__(self, videos: Sequence[VideoArrays], kind: StreamKind, clip_length: int):
        self.videos = list(videos)
        self.kind = kind
        self.clip_length = clip_length
        self.index = [(v, t) for v in range(len(self.videos))
                      for t in range(self.videos[v].rgb.shape[0])]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, idx) -> np.ndarray:
        if np.isscalar(idx):
            v, t = self.index[int(idx)]
            return self.videos[v].input(self.kind, t, self.clip_length)
        return np.stack([self[int(i)] for i in np.asarray(idx)])

    def keys(self) -> list[tuple[str, int]]:
        return [(self.videos[v].record.video_id, t) for v, t in self.index]

    def gts(self) -> list[list]:
        out = []
        for v, t in self.index:
            ann = self.videos[v].record.annotation_map().get(t)
            out.append(list(ann.instances) if ann else [])
        return out
