"""Domain types shared across the toolkit.

Boxes are corner-encoded in normalized image coordinates. Every type here is
an immutable value; behavior is limited to construction and validation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class DataError(RuntimeError):
    """Raised for malformed or missing on-disk inputs."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return validate_box(cls(x1, y1, x2, y2))


def validate_box(b) -> BoundingBox:
    """Return ``b`` unchanged if it is a valid normalized box.

    Accepts a :class:`BoundingBox` or any 4-sequence. Raises
    :class:`ValidationError` naming the violated invariant otherwise.
    """
    if not isinstance(b, BoundingBox):
        if len(b) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(b)}")
        b = BoundingBox(*(float(v) for v in b))
    coords = b.as_tuple()
    if not all(np.isfinite(coords)):
        raise ValidationError(f"box {coords} has non-finite coordinates")
    if min(coords) < 0.0 or max(coords) > 1.0:
        raise ValidationError(f"box {coords} is out of range [0,1]")
    if not b.x_min < b.x_max:
        raise ValidationError(f"box {coords} has zero or negative width")
    if not b.y_min < b.y_max:
        raise ValidationError(f"box {coords} has zero or negative height")
    return b


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    anchor_id: Optional[int] = None


def validate_detection(d: Detection, num_classes: Optional[int] = None) -> Detection:
    validate_box(d.box)
    if not (0.0 <= d.score <= 1.0):
        raise ValidationError(f"detection score {d.score} outside [0,1]")
    if d.class_id < 0 or (num_classes is not None and d.class_id >= num_classes):
        raise ValidationError(f"class id {d.class_id} invalid for {num_classes} classes")
    return d


class Layout(str, enum.Enum):
    CHW = "CHW"
    CNHW = "CNHW"


@dataclass(frozen=True)
class ClipTensor:
    """A 2D (C,H,W) or 3D (C,N,H,W) input block."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        layout = Layout(self.layout)
        object.__setattr__(self, "layout", layout)
        rank = 3 if layout is Layout.CHW else 4
        if self.values.ndim != rank:
            raise ValidationError(
                f"layout {layout.value} needs rank {rank}, array has rank {self.values.ndim}"
            )
        if layout is Layout.CNHW and self.values.shape[1] < 1:
            raise ValidationError("3D clip needs N >= 1")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return 1 if self.layout is Layout.CHW else self.values.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    instances: tuple = ()  # (class_id, BoundingBox) pairs
    tube_ids: tuple = ()  # optional instance identity per entry, for building gt tubes


@dataclass(frozen=True)
class TubeElement:
    frame_index: int
    box: BoundingBox
    score: float


@dataclass(frozen=True)
class ActionTube:
    video_id: str
    class_id: int
    elements: tuple
    tube_score: float

    @classmethod
    def build(cls, video_id: str, class_id: int, elements: Sequence[TubeElement]) -> "ActionTube":
        elements = tuple(elements)
        score = float(np.mean([e.score for e in elements])) if elements else 0.0
        return cls(video_id, class_id, elements, score)

    @property
    def start(self) -> int:
        return self.elements[0].frame_index

    @property
    def end(self) -> int:
        return self.elements[-1].frame_index

    def __len__(self) -> int:
        return len(self.elements)


def check_tube(tube: ActionTube, atol: float = 1e-12) -> ActionTube:
    """Validate the finalized-tube invariants (consecutive frames, mean score)."""
    if not tube.elements:
        raise ValidationError("tube has no elements")
    frames = [e.frame_index for e in tube.elements]
    if any(b - a != 1 for a, b in zip(frames, frames[1:])):
        raise ValidationError(f"tube frames not consecutive: {frames}")
    for e in tube.elements:
        validate_box(e.box)
    mean = float(np.mean([e.score for e in tube.elements]))
    if abs(mean - tube.tube_score) > atol:
        raise ValidationError(f"tube score {tube.tube_score} != mean element score {mean}")
    return tube


class Modality(str, enum.Enum):
    RGB = "RGB"
    FLOW = "OF"


class TemporalArity(str, enum.Enum):
    TWO_D = "2d"
    THREE_D = "3d"


@dataclass(frozen=True)
class StreamKind:
    modality: Modality
    temporal_arity: TemporalArity

    @property
    def is_3d(self) -> bool:
        return self.temporal_arity is TemporalArity.THREE_D

    @property
    def name(self) -> str:
        return f"{self.temporal_arity.value}{self.modality.value}"

    @classmethod
    def parse(cls, token: str) -> "StreamKind":
        key = token.strip().lower()
        for kind in ALL_STREAMS:
            if kind.name.lower() == key:
                return kind
        raise ValidationError(f"unknown stream {token!r}; expected one of "
                              + ", ".join(k.name for k in ALL_STREAMS))

    def __str__(self) -> str:
        return self.name


ALL_STREAMS = tuple(
    StreamKind(m, a) for a in TemporalArity for m in Modality
)
