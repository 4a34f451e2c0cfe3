"""Dataset contract: annotation/detection/tube files and a synthetic video generator.

All files are line-delimited JSON whose first line is a versioned header.
Annotation boxes are in pixels; detection and tube files store normalized
boxes so they round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import (ActionTube, BoundingBox, DataError, Detection, FrameAnnotation,
                   TubeElement, ValidationError, validate_box)

FORMAT_VERSION = 1
ANNOTATIONS = "multissd-annotations"
DETECTIONS = "multissd-detections"
TUBES = "multissd-tubes"
DATASET = "multissd-dataset"
FRAMES_FILE = "frames.rgb"
MOTION_FILE = "motion.json"

MOTIONS = ("translate-left", "translate-right", "rotate", "scale-oscillate", "static")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    num_frames: int
    width: int
    height: int
    annotations: tuple = ()  # FrameAnnotation, sorted by frame index
    frames_dir: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for ann in self.annotations:
            if not 0 <= ann.frame_index < self.num_frames:
                raise ValidationError(
                    f"{self.video_id}: annotation frame {ann.frame_index} outside [0,{self.num_frames})")
            if ann.frame_index in seen:
                raise ValidationError(f"{self.video_id}: duplicate annotation for frame {ann.frame_index}")
            seen.add(ann.frame_index)

    def annotation_map(self) -> dict[int, FrameAnnotation]:
        return {a.frame_index: a for a in self.annotations}

    def gt_tubes(self) -> list[ActionTube]:
        """Ground-truth tubes grouped by (class, tube id), split wherever frames are missing."""
        groups = defaultdict(list)
        for ann in self.annotations:
            ids = ann.tube_ids or (0,) * len(ann.instances)
            for (cls, box), tid in zip(ann.instances, ids):
                groups[(cls, tid)].append(TubeElement(ann.frame_index, box, 1.0))
        tubes = []
        for (cls, _), elems in sorted(groups.items()):
            elems.sort(key=lambda e: e.frame_index)
            run = [elems[0]]
            for e in elems[1:]:
                if e.frame_index != run[-1].frame_index + 1:
                    tubes.append(ActionTube.build(self.video_id, cls, run))
                    run = []
                run.append(e)
            tubes.append(ActionTube.build(self.video_id, cls, run))
        return tubes


def _header(kind: str, **extra) -> str:
    return json.dumps({"format": kind, "version": FORMAT_VERSION, **extra})


def _read_lines(path: Path, kind: str, allow_empty: bool = False):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        if allow_empty:
            return
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:1: header is not JSON ({e})") from None
    if header.get("format") != kind:
        raise DataError(f"{path}: expected format {kind!r}, got {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {header.get('version')!r} (expected {FORMAT_VERSION})")
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            yield lineno, json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: invalid JSON ({e})") from None


def load_annotations(path) -> list[VideoRecord]:
    """Parse an annotation file into validated :class:`VideoRecord` values.

    Video lines ``{"video", "width", "height", "frames"}`` must precede that
    video's instance lines ``{"video", "frame", "class", "box", ["tube"]}``.
    Classes are 1-based in the file and 0-based in memory. Any malformed
    record rejects the whole file. A zero-length file holds no videos.
    """
    path = Path(path)
    videos: dict[str, dict] = {}
    order = []
    frames: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for lineno, rec in _read_lines(path, ANNOTATIONS, allow_empty=True):
        vid = rec.get("video")
        where = f"{path}:{lineno} (video {vid!r})"
        try:
            if "frame" not in rec:
                w, h, n = int(rec["width"]), int(rec["height"]), int(rec["frames"])
                if vid in videos:
                    raise DataError(f"{where}: video declared twice")
                if min(w, h, n) < 1:
                    raise DataError(f"{where}: width/height/frames must be positive")
                videos[vid] = {"width": w, "height": h, "frames": n, "dir": rec.get("dir")}
                order.append(vid)
                continue
            if vid not in videos:
                raise DataError(f"{where}: instance before its video declaration")
            meta = videos[vid]
            t, cls = int(rec["frame"]), int(rec["class"])
            if cls < 1:
                raise DataError(f"{where}: class ids are 1-based, got {cls}")
            if not 0 <= t < meta["frames"]:
                raise DataError(f"{where}: frame {t} outside video length {meta['frames']}")
            x1, y1, x2, y2 = (float(v) for v in rec["box"])
            box = validate_box((x1 / meta["width"], y1 / meta["height"],
                                x2 / meta["width"], y2 / meta["height"]))
            frames[vid][t].append((cls - 1, box, int(rec.get("tube", 0))))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{where}: malformed record ({e})") from None
    records = []
    for vid in order:
        meta = videos[vid]
        anns = tuple(
            FrameAnnotation(t, tuple((c, b) for c, b, _ in inst), tuple(i for _, _, i in inst))
            for t, inst in sorted(frames[vid].items()))
        fdir = Path(meta["dir"]) if meta["dir"] else None
        if fdir is not None and not fdir.is_absolute():
            fdir = path.parent / fdir
        records.append(VideoRecord(vid, meta["frames"], meta["width"], meta["height"], anns, fdir))
    return records


def write_annotations(records: Iterable[VideoRecord], path, relative_to: Optional[Path] = None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    lines = [_header(ANNOTATIONS)]
    for r in records:
        head = {"video": r.video_id, "width": r.width, "height": r.height, "frames": r.num_frames}
        if r.frames_dir is not None:
            fdir = Path(r.frames_dir)
            try:
                fdir = fdir.relative_to(base)
            except ValueError:
                pass
            head["dir"] = str(fdir)
        lines.append(json.dumps(head))
        for ann in r.annotations:
            ids = ann.tube_ids or (0,) * len(ann.instances)
            for (cls, box), tid in zip(ann.instances, ids):
                lines.append(json.dumps({
                    "video": r.video_id, "frame": ann.frame_index, "class": cls + 1,
                    "box": [box.x_min * r.width, box.y_min * r.height,
                            box.x_max * r.width, box.y_max * r.height],
                    "tube": tid}))
    Path(path).write_text("\n".join(lines) + "\n")


def write_detections(dets: Mapping, path) -> None:
    """Write ``{(video_id, frame): [Detection, ...]}``; anchor ids are not stored."""
    lines = [_header(DETECTIONS, coords="normalized")]
    for (vid, t) in sorted(dets):
        for d in dets[(vid, t)]:
            lines.append(json.dumps({"video": vid, "frame": int(t), "class": int(d.class_id) + 1,
                                     "score": float(d.score), "box": list(d.box.as_tuple())}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path) -> dict[tuple[str, int], list[Detection]]:
    out: dict[tuple[str, int], list[Detection]] = defaultdict(list)
    for lineno, rec in _read_lines(Path(path), DETECTIONS):
        try:
            box = validate_box(rec["box"])
            out[(rec["video"], int(rec["frame"]))].append(
                Detection(box, int(rec["class"]) - 1, float(rec["score"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed detection ({e})") from None
    return dict(out)


def write_tubes(tubes: Iterable[ActionTube], path) -> None:
    lines = [_header(TUBES, coords="normalized")]
    for tube in tubes:
        lines.append(json.dumps({
            "video": tube.video_id, "class": tube.class_id + 1, "score": tube.tube_score,
            "frames": [e.frame_index for e in tube.elements],
            "boxes": [list(e.box.as_tuple()) for e in tube.elements],
            "scores": [e.score for e in tube.elements]}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tubes(path) -> list[ActionTube]:
    tubes = []
    for lineno, rec in _read_lines(Path(path), TUBES):
        try:
            elems = tuple(TubeElement(int(t), validate_box(b), float(s))
                          for t, b, s in zip(rec["frames"], rec["boxes"], rec["scores"], strict=True))
            tubes.append(ActionTube(rec["video"], int(rec["class"]) - 1, elems, float(rec["score"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed tube ({e})") from None
    return tubes


def gt_by_frame(records: Iterable[VideoRecord]) -> dict[tuple[str, int], list]:
    """``{(video, frame): [(class_id, box), ...]}`` over every frame of every video."""
    out = {}
    for r in records:
        amap = r.annotation_map()
        for t in range(r.num_frames):
            ann = amap.get(t)
            out[(r.video_id, t)] = list(ann.instances) if ann else []
    return out


# -- raw frames -------------------------------------------------------------

def write_frames(video_dir, frames: np.ndarray) -> None:
    """Store ``(T, 3, H, W)`` uint8 frames plus a manifest."""
    video_dir = Path(video_dir)
    video_dir.mkdir(parents=True, exist_ok=True)
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    t, c, h, w = frames.shape
    (video_dir / FRAMES_FILE).write_bytes(frames.tobytes())
    manifest = {"format": "multissd-frames", "version": FORMAT_VERSION,
                "width": w, "height": h, "count": t, "channels": c, "layout": "TCHW", "dtype": "u8"}
    (video_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def read_frames(video_dir) -> np.ndarray:
    video_dir = Path(video_dir)
    try:
        m = json.loads((video_dir / "manifest.json").read_text())
        raw = (video_dir / FRAMES_FILE).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"{video_dir}: missing frame data ({e.filename})") from None
    shape = (m["count"], m.get("channels", 3), m["height"], m["width"])
    if len(raw) != math.prod(shape):
        raise DataError(f"{video_dir}: frame file size {len(raw)} does not match manifest {shape}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(shape)


# -- synthetic generator ----------------------------------------------------

@dataclass(frozen=True)
class ClassSpec:
    name: str
    shape: str  # square | triangle | circle | cross
    motion: str  # one of MOTIONS
    color: tuple = (0.95, 0.85, 0.15)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic dataset description.

    Each video shows one shape that is idle, performs its class's motion for
    a contiguous segment, then idles again. Only the moving frames are
    annotated, so the data is untrimmed like real action footage.
    """

    classes: tuple = (
        ClassSpec("move-left", "square", "translate-left"),
        ClassSpec("move-right", "square", "translate-right"),
    )
    frames_per_video: int = 24
    videos_per_class: int = 20
    test_videos_per_class: int = 5
    image_size: int = 64
    noise: float = 0.03
    seed: int = 0
    speed: float = 2.0
    object_size: tuple = (12.0, 16.0)
    action_length: tuple = (10, 16)
    flow_bound: float = 8.0

    def __post_init__(self):
        for c in self.classes:
            if c.motion not in MOTIONS:
                raise ValidationError(f"unknown motion program {c.motion!r}")
        appearances = defaultdict(set)
        for c in self.classes:
            appearances[(c.shape, tuple(c.color))].add(c.motion)
        if not any(len(m) >= 2 for m in appearances.values()):
            raise ValidationError("need at least two classes with identical appearance and different motion")
        lo, hi = self.action_length
        if not 1 <= lo <= hi < self.frames_per_video:
            raise ValidationError("action_length must fit inside the video (frame 0 is never an action)")

    def ambiguous_classes(self) -> list[int]:
        """Indices of classes that share their static appearance with another class."""
        groups = defaultdict(list)
        for i, c in enumerate(self.classes):
            groups[(c.shape, tuple(c.color))].append(i)
        return sorted(i for g in groups.values() if len(g) >= 2 for i in g)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["classes"] = tuple(ClassSpec(**{**c, "color": tuple(c["color"])}) for c in d["classes"])
        for key in ("object_size", "action_length"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def pose_matrix(pose: Mapping) -> np.ndarray:
    """Affine map from canonical shape coordinates to pixel coordinates (3x3)."""
    c, s = math.cos(pose["angle"]), math.sin(pose["angle"])
    k = pose["size"]
    return np.array([[k * c, -k * s, pose["cx"]],
                     [k * s, k * c, pose["cy"]],
                     [0.0, 0.0, 1.0]])


_TRIANGLE = np.array([[0.0, -0.5], [0.5, 0.5], [-0.5, 0.5]])


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "square":
        return (np.abs(u) <= 0.5) & (np.abs(v) <= 0.5)
    if shape == "circle":
        return u * u + v * v <= 0.25
    if shape == "cross":
        return ((np.abs(u) <= 0.5) & (np.abs(v) <= 0.17)) | ((np.abs(u) <= 0.17) & (np.abs(v) <= 0.5))
    if shape == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for i in range(3):
            a, b = _TRIANGLE[i], _TRIANGLE[(i + 1) % 3]
            inside &= (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0]) >= 0
        return inside
    raise ValidationError(f"unknown shape {shape!r}")


def _outline(shape: str) -> np.ndarray:
    if shape in ("square", "cross"):
        return np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    if shape == "triangle":
        return _TRIANGLE
    theta = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    return 0.5 * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def shape_mask(shape: str, pose: Mapping, height: int, width: int) -> np.ndarray:
    """Pixels whose centers fall inside the posed shape."""
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    inv = np.linalg.inv(pose_matrix(pose))
    u = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    v = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return _inside(shape, u, v)


def shape_box(shape: str, pose: Mapping, height: int, width: int) -> tuple[float, float, float, float]:
    """Tight pixel box of the posed shape outline, clipped to the image."""
    pts = _outline(shape)
    m = pose_matrix(pose)
    xy = pts @ m[:2, :2].T + m[:2, 2]
    x1, y1 = xy.min(axis=0)
    x2, y2 = xy.max(axis=0)
    return (max(0.0, x1), max(0.0, y1), min(float(width), x2), min(float(height), y2))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.55, size=(3, 5, 5))
    idx = np.linspace(0, 4, size)
    i0 = np.floor(idx).astype(int).clip(0, 3)
    f = idx - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def _trajectory(spec: ClassSpec, cfg: SynthConfig, rng: np.random.Generator):
    """Per-frame poses plus the (start, stop) of the action segment."""
    n, size = cfg.frames_per_video, cfg.image_size
    length = int(rng.integers(cfg.action_length[0], cfg.action_length[1] + 1))
    start = int(rng.integers(1, n - length + 1))
    k = float(rng.uniform(*cfg.object_size))
    half = k / 2 * (1.5 if spec.motion == "scale-oscillate" else 1.42)
    travel = cfg.speed * length if spec.motion.startswith("translate") else 0.0
    # half-step offset makes the annotated positions of mirrored classes identically distributed
    shift = 0.5 * cfg.speed if travel else 0.0
    lo, hi = half + 1.0, size - half - 1.0 - travel
    x0 = float(rng.uniform(lo, hi))
    cy = float(rng.uniform(half + 1.0, size - half - 1.0))
    angle0 = float(rng.uniform(0, 2 * np.pi)) if spec.shape != "square" or spec.motion == "rotate" else 0.0
    poses = []
    for t in range(n):
        steps = min(max(t - start + 1, 0), length)  # motion applied at frames start..start+length-1
        pose = {"cx": x0, "cy": cy, "size": k, "angle": angle0}
        if spec.motion == "translate-right":
            pose["cx"] = x0 + cfg.speed * steps - shift
        elif spec.motion == "translate-left":
            pose["cx"] = size - (x0 + cfg.speed * steps - shift)
        elif spec.motion == "rotate":
            pose["angle"] = angle0 + steps * cfg.speed * 2.0 / k
        elif spec.motion == "scale-oscillate":
            pose["size"] = k * (1.0 + 0.3 * math.sin(2 * math.pi * steps / 8.0))
        poses.append(pose)
    return poses, (start, start + length)


def render_video(spec: ClassSpec, cfg: SynthConfig, rng: np.random.Generator):
    """Render one video; returns (uint8 frames (T,3,H,W), poses, action span)."""
    size = cfg.image_size
    poses, span = _trajectory(spec, cfg, rng)
    bg = _background(rng, size)
    color = np.clip(np.asarray(spec.color) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    frames = np.empty((cfg.frames_per_video, 3, size, size), dtype=np.uint8)
    for t, pose in enumerate(poses):
        img = bg.copy()
        mask = shape_mask(spec.shape, pose, size, size)
        img[:, mask] = color[:, None]
        img += cfg.noise * rng.standard_normal(img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return frames, poses, span


def generate_synthetic(cfg: SynthConfig, root) -> list[VideoRecord]:
    """Write a synthetic dataset under ``root``; byte-deterministic given ``cfg``.

    Layout: ``dataset.json``, ``annotations.jsonl`` and
    ``videos/<id>/{manifest.json, frames.rgb, motion.json}``.
    """
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    records = []
    splits = {"train": [], "test": []}
    counter = 0
    for split, per_class in (("train", cfg.videos_per_class), ("test", cfg.test_videos_per_class)):
        for i in range(per_class):
            for c, spec in enumerate(cfg.classes):
                vid = f"{split}_{spec.name}_{i:03d}"
                rng = np.random.default_rng([cfg.seed, counter])
                counter += 1
                frames, poses, (a, b) = render_video(spec, cfg, rng)
                vdir = root / "videos" / vid
                write_frames(vdir, frames)
                motion = {"shape": spec.shape, "class": c, "action": [a, b], "poses": poses}
                (vdir / MOTION_FILE).write_text(json.dumps(motion, sort_keys=True) + "\n")
                anns = []
                for t in range(a, b):
                    x1, y1, x2, y2 = shape_box(spec.shape, poses[t], cfg.image_size, cfg.image_size)
                    s = cfg.image_size
                    anns.append(FrameAnnotation(t, ((c, BoundingBox(x1 / s, y1 / s, x2 / s, y2 / s)),), (0,)))
                records.append(VideoRecord(vid, cfg.frames_per_video, cfg.image_size, cfg.image_size,
                                           tuple(anns), vdir))
                splits[split].append(vid)
    write_annotations(records, root / "annotations.jsonl", relative_to=root)
    manifest = {"format": DATASET, "version": FORMAT_VERSION,
                "classes": [c.name for c in cfg.classes],
                "ambiguous_classes": cfg.ambiguous_classes(),
                "flow_bound": cfg.flow_bound, "splits": splits, "config": cfg.to_dict()}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return records


@dataclass
class Dataset:
    """A dataset directory opened for reading."""

    root: Path
    manifest: dict
    records: list = field(default_factory=list)

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        try:
            manifest = json.loads((root / "dataset.json").read_text())
        except FileNotFoundError:
            raise DataError(f"{root}: no dataset.json manifest") from None
        if manifest.get("format") != DATASET or manifest.get("version") != FORMAT_VERSION:
            raise DataError(f"{root}: unsupported dataset manifest")
        return cls(root, manifest, load_annotations(root / "annotations.jsonl"))

    @property
    def class_names(self) -> list[str]:
        return list(self.manifest["classes"])

    @property
    def flow_bound(self) -> float:
        return float(self.manifest.get("flow_bound", 8.0))

    def split(self, name: str) -> list[VideoRecord]:
        ids = self.manifest["splits"].get(name)
        if ids is None:
            raise DataError(f"{self.root}: no split named {name!r}")
        by_id = {r.video_id: r for r in self.records}
        return [by_id[i] for i in ids]

    def video_dir(self, record: VideoRecord) -> Path:
        return record.frames_dir if record.frames_dir is not None else self.root / "videos" / record.video_id
