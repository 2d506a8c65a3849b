"""Shared value types for the open-world detection pipeline.

Boxes are axis-aligned and stored in center/width/height form. Class labels
are a tagged union of three variants: a known class id, an unknown class id,
or background. Known ids occupy ``[0, known_count)`` and unknown ids occupy
``[known_count, known_count + unknown_slots)`` so the two ranges never
collide; background carries no integer id at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

Corners = tuple[float, float, float, float]


class LabelKind(Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"
    BACKGROUND = "background"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center coordinates plus positive width and height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


def to_corners(box: Box) -> Corners:
    """Return the ``(xmin, ymin, xmax, ymax)`` view of a center-format box."""
    half_w = box.w / 2.0
    half_h = box.h / 2.0
    return (box.cx - half_w, box.cy - half_h, box.cx + half_w, box.cy + half_h)


def from_corners(xmin: float, ymin: float, xmax: float, ymax: float) -> Box:
    """Build a center-format box from corner coordinates."""
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate corners ({xmin}, {ymin}, {xmax}, {ymax})")
    return Box((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, xmax - xmin, ymax - ymin)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    inter_w = min(ax1, bx1) - max(ax0, bx0)
    inter_h = min(ay1, by1) - max(ay0, by0)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    # corner round-trips can leave the ratio a few ulp above 1
    return min(inter / union, 1.0)


@dataclass(frozen=True)
class ClassLabel:
    """Tagged class label: known id, unknown id, or background.

    Use the factory methods rather than the constructor; ``class_id`` is
    required for known/unknown labels and must be absent for background.
    """

    kind: LabelKind
    class_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind is LabelKind.BACKGROUND:
            if self.class_id is not None:
                raise ValueError("background label carries no class id")
        else:
            if self.class_id is None or self.class_id < 0:
                raise ValueError(f"{self.kind.value} label needs a non-negative class id")

    @classmethod
    def known(cls, class_id: int) -> "ClassLabel":
        return cls(LabelKind.KNOWN, class_id)

    @classmethod
    def unknown(cls, class_id: int) -> "ClassLabel":
        return cls(LabelKind.UNKNOWN, class_id)

    @classmethod
    def background(cls) -> "ClassLabel":
        return cls(LabelKind.BACKGROUND)

    @property
    def is_known(self) -> bool:
        return self.kind is LabelKind.KNOWN

    @property
    def is_unknown(self) -> bool:
        return self.kind is LabelKind.UNKNOWN

    @property
    def is_background(self) -> bool:
        return self.kind is LabelKind.BACKGROUND


def label_for_class_id(class_id: int, known_count: int) -> ClassLabel:
    """Map a raw integer class id onto the known/unknown split at ``known_count``."""
    if class_id < 0:
        raise ValueError(f"class id must be non-negative, got {class_id}")
    if class_id < known_count:
        return ClassLabel.known(class_id)
    return ClassLabel.unknown(class_id)


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated object. ``is_pseudo`` marks objects minted by the
    pseudo-label selector rather than a human annotator; those are always
    unknown-labeled."""

    image_id: int
    label: ClassLabel
    box: Box
    is_pseudo: bool = False

    def __post_init__(self) -> None:
        if self.label.is_background:
            raise ValueError("ground truth cannot be labeled background")
        if self.is_pseudo and not self.label.is_unknown:
            raise ValueError("pseudo ground truth must carry an unknown label")


@dataclass(frozen=True)
class Detection:
    """One scored detection emitted by a model."""

    image_id: int
    label: ClassLabel
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")
        if self.label.is_background:
            raise ValueError("detections never carry the background label")


@dataclass(frozen=True)
class Proposal:
    """Class-agnostic region proposal with an objectness score."""

    image_id: int
    box: Box
    objectness: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must lie in [0, 1], got {self.objectness}")


@dataclass(frozen=True)
class TaskConfig:
    """Incremental-task schema: at task ``t`` the first ``known_count`` class
    ids are known and ``unknown_slots`` prediction slots are reserved for
    unknowns. The combined budget ``known_count + unknown_slots`` is fixed per
    deployment (80 at full scale; much smaller on synthetic data)."""

    task_index: int
    known_count: int
    unknown_slots: int

    def __post_init__(self) -> None:
        if self.task_index < 1:
            raise ValueError("task index starts at 1")
        if self.known_count < 0 or self.unknown_slots < 0:
            raise ValueError("class counts must be non-negative")

    @property
    def total_classes(self) -> int:
        return self.known_count + self.unknown_slots


def validate_task_sequence(tasks: Sequence[TaskConfig]) -> None:
    """Check that known classes only ever grow across tasks and the total
    class budget stays fixed."""
    for prev, cur in zip(tasks, tasks[1:]):
        if cur.task_index != prev.task_index + 1:
            raise ValueError(f"task indices must be consecutive, got {prev.task_index} -> {cur.task_index}")
        if cur.known_count < prev.known_count:
            raise ValueError(f"known classes shrank between tasks {prev.task_index} and {cur.task_index}")
        if cur.total_classes != prev.total_classes:
            raise ValueError("total class budget must stay fixed across tasks")
