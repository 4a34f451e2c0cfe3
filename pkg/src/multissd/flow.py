"""Optical-flow providers.

A provider returns raw ``(2, H, W)`` u/v displacement fields in pixels for the
pair ``(t-1, t)``. :func:`flow_for_frame` encodes them as 3-channel images
``(u, v, magnitude)`` mapped linearly into ``[0, 1]``, the RGB input range.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from .core import ClipTensor, DataError, Layout
from .data import MOTION_FILE, pose_matrix, shape_mask

FLOW_MANIFEST = "manifest.json"


class FlowUnavailable(DataError):
    """Raised when no flow exists for a requested video/frame."""


class FlowProvider(Protocol):
    bound: float

    def frame_size(self, video_id: str) -> tuple[int, int]: ...

    def raw_flow(self, video_id: str, t: int) -> np.ndarray: ...


def encode_flow(uv: np.ndarray, bound: float) -> np.ndarray:
    """``(2,H,W)`` pixel flow -> ``(3,H,W)`` image in [0,1]; zero flow maps to (0.5, 0.5, 0)."""
    u, v = uv[0], uv[1]
    mag = np.hypot(u, v)
    img = np.stack([0.5 + u / (2 * bound), 0.5 + v / (2 * bound), mag / bound])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def zero_flow_image(height: int, width: int) -> np.ndarray:
    return encode_flow(np.zeros((2, height, width), np.float32), 1.0)


def flow_for_frame(provider: FlowProvider, video_id: str, t: int) -> ClipTensor:
    """Encoded flow between frames ``t-1`` and ``t``; frame 0 gets the zero-flow image."""
    if t < 0:
        raise FlowUnavailable(f"{video_id}: negative frame index {t}")
    if t == 0:
        h, w = provider.frame_size(video_id)
        return ClipTensor(zero_flow_image(h, w), Layout.CHW)
    return ClipTensor(encode_flow(provider.raw_flow(video_id, t), provider.bound), Layout.CHW)


def flow_stack(provider: FlowProvider, video_id: str, t: int, n: int) -> ClipTensor:
    """Flow images for frames ``t-n+1 .. t`` as ``(3, n, H, W)``; indices below 1 are zero flow."""
    if n < 1:
        raise ValueError("stack length must be >= 1")
    h, w = provider.frame_size(video_id)
    zero = zero_flow_image(h, w)
    slices = [zero if i < 1 else flow_for_frame(provider, video_id, i).values
              for i in range(t - n + 1, t + 1)]
    return ClipTensor(np.stack(slices, axis=1), Layout.CNHW)


class SyntheticFlowProvider:
    """Exact flow from the generator's per-frame pose metadata.

    On object pixels of frame ``t`` the flow is ``p - M_{t-1} M_t^{-1} p``;
    the background is static and has zero flow.
    """

    def __init__(self, dataset_root, bound: float = 8.0):
        self.root = Path(dataset_root)
        self.bound = bound

    @lru_cache(maxsize=256)
    def _motion(self, video_id: str) -> dict:
        path = self.root / "videos" / video_id / MOTION_FILE
        try:
            motion = json.loads(path.read_text())
        except FileNotFoundError:
            raise FlowUnavailable(f"flow unavailable for video {video_id}: no motion metadata at {path}") from None
        manifest = json.loads((path.parent / "manifest.json").read_text())
        motion["size"] = (manifest["height"], manifest["width"])
        return motion

    def frame_size(self, video_id: str) -> tuple[int, int]:
        return self._motion(video_id)["size"]

    def num_frames(self, video_id: str) -> int:
        return len(self._motion(video_id)["poses"])

    def raw_flow(self, video_id: str, t: int) -> np.ndarray:
        m = self._motion(video_id)
        poses = m["poses"]
        if not 1 <= t < len(poses):
            raise FlowUnavailable(f"flow unavailable for video {video_id}, frame {t}")
        h, w = m["size"]
        if poses[t] == poses[t - 1]:
            return np.zeros((2, h, w), np.float32)  # exact zero, no inverse round-off
        mask = shape_mask(m["shape"], poses[t], h, w)
        back = pose_matrix(poses[t - 1]) @ np.linalg.inv(pose_matrix(poses[t]))
        ys, xs = np.nonzero(mask)
        px, py = xs + 0.5, ys + 0.5
        flow = np.zeros((2, h, w), np.float32)
        flow[0, ys, xs] = px - (back[0, 0] * px + back[0, 1] * py + back[0, 2])
        flow[1, ys, xs] = py - (back[1, 0] * px + back[1, 1] * py + back[1, 2])
        return flow


class FileFlowProvider:
    """Precomputed flow: ``<root>/<video>/manifest.json`` plus one ``NNNNNN.f32`` per frame.

    Each frame file holds little-endian float32 ``(2, H, W)`` u/v planes,
    row-major, for the pair ``(t-1, t)``.
    """

    def __init__(self, root, bound: float = 8.0):
        self.root = Path(root)
        self.bound = bound
        self._manifests: dict[str, dict] = {}

    def _manifest(self, video_id: str) -> dict:
        if video_id not in self._manifests:
            path = self.root / video_id / FLOW_MANIFEST
            try:
                self._manifests[video_id] = json.loads(path.read_text())
            except FileNotFoundError:
                raise FlowUnavailable(f"flow unavailable for video {video_id}: missing {path}") from None
        return self._manifests[video_id]

    def frame_size(self, video_id: str) -> tuple[int, int]:
        m = self._manifest(video_id)
        return (m["height"], m["width"])

    def raw_flow(self, video_id: str, t: int) -> np.ndarray:
        h, w = self.frame_size(video_id)
        path = self.root / video_id / f"{t:06d}.f32"
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise FlowUnavailable(f"flow unavailable for video {video_id}, frame {t}: missing {path}") from None
        if len(raw) != 2 * h * w * 4:
            raise DataError(f"{path}: expected {2 * h * w * 4} bytes, found {len(raw)}")
        return np.frombuffer(raw, dtype="<f4").reshape(2, h, w).astype(np.float32)


def write_flow_files(provider: FlowProvider, video_id: str, num_frames: int, out_root) -> Path:
    """Materialize a provider's flow for frames ``1..num_frames-1`` in the file format."""
    out = Path(out_root) / video_id
    out.mkdir(parents=True, exist_ok=True)
    h, w = provider.frame_size(video_id)
    manifest = {"format": "multissd-flow", "version": 1, "width": w, "height": h,
                "frames": num_frames, "dtype": "<f4", "layout": "2HW"}
    (out / FLOW_MANIFEST).write_text(json.dumps(manifest, sort_keys=True) + "\n")
    for t in range(1, num_frames):
        uv = np.ascontiguousarray(provider.raw_flow(video_id, t), dtype="<f4")
        (out / f"{t:06d}.f32").write_bytes(uv.tobytes())
    return out
