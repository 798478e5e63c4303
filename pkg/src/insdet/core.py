"""Domain types and the pure geometric/vector primitives every module shares.

Embedding vectors and matrices are plain numpy arrays (1-D of length q, and
n x q row-major). All operations here are pure functions on immutable values
and are safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EngineError

ORIGINS = ("real", "synthetic")
DIFFICULTIES = ("easy", "hard", "untagged")
SIZE_CLASSES = ("small", "medium", "large")

# COCO-convention area cutoffs (32^2, 96^2); manifests may override.
DEFAULT_SIZE_THRESHOLDS = (1024.0, 9216.0)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """Distance d(u, v) = 1 - cos(u, v), in [0, 2].

    Raises ``ZeroNorm`` for zero-length inputs rather than returning NaN.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise EngineError("ZeroNorm", "cosine distance is undefined for zero-norm vectors")
    cos = float(np.dot(u, v) / (nu * nv))
    return 1.0 - min(1.0, max(-1.0, cos))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner (x, y) plus width/height, in pixels.

    Half-open pixel semantics: area = w * h.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise EngineError("InvalidBox", f"non-finite box coordinates {vals}")
        if self.w <= 0 or self.h <= 0:
            raise EngineError("InvalidBox", f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return min(1.0, inter / (a.area + b.area - inter))


def size_class(box: BoundingBox, thresholds: tuple[float, float] = DEFAULT_SIZE_THRESHOLDS) -> str:
    """Partition boxes by area: small < a_s <= medium < a_m <= large."""
    a_s, a_m = thresholds
    if not a_s < a_m:
        raise EngineError("BadThresholds", f"size thresholds must satisfy a_s < a_m, got ({a_s}, {a_m})")
    area = box.area
    if area < a_s:
        return "small"
    if area < a_m:
        return "medium"
    return "large"


@dataclass(frozen=True)
class ReferenceImage:
    """One visual reference of an instance: a row in the reference matrix."""

    instance: int
    row: int
    origin: str  # "real" or "synthetic"
    view_index: int = 0


@dataclass(frozen=True)
class Proposal:
    """A candidate box in a scene with its embedding row."""

    box: BoundingBox
    row: int
    detector_score: float | None = None


@dataclass(frozen=True)
class GroundTruth:
    """An annotated instance occurrence in a scene.

    ``novel`` marks instances that have no visual references (test-only
    instances); every non-novel instance must appear in the reference set.
    Size class and difficulty derive from the box area and the owning scene.
    """

    instance: int
    box: BoundingBox
    novel: bool = False


@dataclass(frozen=True)
class Scene:
    """One scene image: proposals to classify and ground truth to score against."""

    scene_id: str
    width: int
    height: int
    difficulty: str
    proposals: tuple[Proposal, ...] = field(default_factory=tuple)
    ground_truth: tuple[GroundTruth, ...] = field(default_factory=tuple)
