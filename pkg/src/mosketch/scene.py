"""Scene decomposition: object identification, grounding, point assignment.

The planner splits a complex instruction into per-object sub-instructions,
the grounding client supplies initial bounding boxes, and every control
point is then assigned to exactly one object by the distance from its
stroke's center to the candidate boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clients import (
    TEMPLATE_SCENE_DECOMPOSITION,
    GroundingClient,
    PlannerClient,
    encode_image,
)
from .errors import DecompositionError, GroundingMissError, ValidationError
from .sketch import VectorSketch, stroke_center

MAX_OBJECTS = 7
MAX_INSTRUCTIONS = 5


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner (x, y) and non-negative extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"box {name} is not finite")
            object.__setattr__(self, name, float(v))
        if self.w < 0 or self.h < 0:
            raise ValidationError(f"box extent must be >= 0, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def clamp(self, canvas: tuple[float, float]) -> "BoundingBox":
        cw, ch = canvas
        x0 = min(max(self.x, 0.0), cw)
        y0 = min(max(self.y, 0.0), ch)
        x1 = min(max(self.x + self.w, 0.0), cw)
        y1 = min(max(self.y + self.h, 0.0), ch)
        return BoundingBox(x0, y0, max(x1 - x0, 0.0), max(y1 - y0, 0.0))

    def distance_to(self, point) -> float:
        """0 inside; otherwise Euclidean distance to the nearest boundary point."""
        px, py = float(point[0]), float(point[1])
        dx = max(self.x - px, 0.0, px - (self.x + self.w))
        dy = max(self.y - py, 0.0, py - (self.y + self.h))
        return math.hypot(dx, dy)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class SubInstruction:
    text: str
    object_indices: tuple[int, ...]


@dataclass(frozen=True)
class DecompositionResult:
    objects: tuple[str, ...]
    sub_instructions: tuple[SubInstruction, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "sub_instructions", tuple(self.sub_instructions))
        m, r = len(self.objects), len(self.sub_instructions)
        if not 1 <= m <= MAX_OBJECTS:
            raise ValidationError(f"object count {m} outside [1, {MAX_OBJECTS}]")
        if not 1 <= r <= MAX_INSTRUCTIONS:
            raise ValidationError(f"sub-instruction count {r} outside [1, {MAX_INSTRUCTIONS}]")
        if len(set(self.objects)) != m:
            raise ValidationError("object names must be pairwise distinct")
        for i, sub in enumerate(self.sub_instructions):
            if not sub.object_indices:
                raise ValidationError(f"sub-instruction {i} references no objects")
            for j in sub.object_indices:
                if not 0 <= j < m:
                    raise ValidationError(f"sub-instruction {i} references unknown object {j}")

    @property
    def m(self) -> int:
        return len(self.objects)

    @property
    def r(self) -> int:
        return len(self.sub_instructions)


@dataclass(frozen=True)
class PointAssignment:
    owner: np.ndarray  # (n,) object index per control point

    def __post_init__(self):
        arr = np.array(self.owner, dtype=np.intp)
        arr.flags.writeable = False
        object.__setattr__(self, "owner", arr)

    @property
    def n(self) -> int:
        return self.owner.shape[0]

    def points_of(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.owner == j)

    def per_object(self, m: int) -> list[np.ndarray]:
        return [self.points_of(j) for j in range(m)]


def _parse_decomposition(raw: dict) -> DecompositionResult:
    if not isinstance(raw, dict):
        raise DecompositionError("planner response is not a JSON object", raw=raw)
    objects = raw.get("objects")
    instructions = raw.get("instructions")
    if (not isinstance(objects, list) or not objects
            or not all(isinstance(o, str) and o for o in objects)):
        raise DecompositionError("response field 'objects' must be a non-empty "
                                 "list of names", raw=raw)
    if not isinstance(instructions, list) or not instructions:
        raise DecompositionError("response field 'instructions' must be a "
                                 "non-empty list", raw=raw)
    if len(objects) > MAX_OBJECTS:
        raise ValidationError(
            f"planner proposed {len(objects)} objects, limit is {MAX_OBJECTS}")
    if len(instructions) > MAX_INSTRUCTIONS:
        raise ValidationError(
            f"planner proposed {len(instructions)} sub-instructions, "
            f"limit is {MAX_INSTRUCTIONS}")
    index = {name: j for j, name in enumerate(objects)}
    if len(index) != len(objects):
        raise DecompositionError("duplicate object names in response", raw=raw)
    subs = []
    for i, item in enumerate(instructions):
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise DecompositionError(f"instructions[{i}] lacks a 'text' string", raw=raw)
        names = item.get("objects")
        if not isinstance(names, list) or not names:
            raise DecompositionError(f"instructions[{i}] lacks an 'objects' list", raw=raw)
        idxs = []
        for name in names:
            if name not in index:
                raise DecompositionError(
                    f"instructions[{i}] references unknown object {name!r}", raw=raw)
            idxs.append(index[name])
        subs.append(SubInstruction(item["text"], tuple(dict.fromkeys(idxs))))
    return DecompositionResult(tuple(objects), tuple(subs))


def decompose_scene(image_png: bytes, instruction: str,
                    planner: PlannerClient, canvas: tuple[float, float],
                    attempts: int = 3) -> tuple[DecompositionResult, dict]:
    """Ask the planner to identify objects and split the instruction.

    Returns the validated result plus the raw response for transcripting.
    Schema-invalid responses are retried up to `attempts` times; bound
    violations (too many objects or instructions) fail immediately.
    """
    if not instruction:
        raise ValidationError("instruction must be non-empty")
    request = {
        "image": encode_image(image_png),
        "instruction": instruction,
        "template_id": TEMPLATE_SCENE_DECOMPOSITION,
        "canvas": [canvas[0], canvas[1]],
    }
    last: DecompositionError | None = None
    for _ in range(attempts):
        raw = planner.complete(request)
        try:
            return _parse_decomposition(raw), raw
        except DecompositionError as e:
            last = e
    raise last


def ground_objects(sketch: VectorSketch, image_png: bytes,
                   objects: tuple[str, ...], grounder: GroundingClient,
                   fallback_whole_canvas: bool = False) -> list[BoundingBox]:
    """One initial box per object, in object order, clamped to the canvas.

    A label with no detection (or one entirely off-canvas) is a grounding
    miss; with the explicit fallback flag it becomes a whole-canvas box.
    """
    if not objects:
        raise ValidationError("ground_objects needs at least one object")
    raw = grounder.detect({"image": encode_image(image_png), "labels": list(objects)})
    boxes_raw = raw.get("boxes") if isinstance(raw, dict) else None
    if not isinstance(boxes_raw, list):
        raise GroundingMissError("(malformed grounding response)")
    best: dict[str, tuple[float, BoundingBox]] = {}
    for item in boxes_raw:
        try:
            label = item["label"]
            box = BoundingBox(item["x"], item["y"], item["w"], item["h"])
            score = float(item.get("score", 0.0))
        except (KeyError, TypeError, ValidationError):
            continue
        if label not in best or score > best[label][0]:
            best[label] = (score, box)
    cw, ch = sketch.canvas
    out = []
    for name in objects:
        hit = best.get(name)
        box = hit[1].clamp(sketch.canvas) if hit else None
        if box is None or box.area == 0.0:
            if not fallback_whole_canvas:
                raise GroundingMissError(name)
            box = BoundingBox(0.0, 0.0, cw, ch)
        out.append(box)
    return out


def assign_points(sketch: VectorSketch, boxes: list[BoundingBox]) -> PointAssignment:
    """Owner of each control point: the box closest to its stroke's center.

    All four points of a stroke share one owner. Ties break to the smaller
    box area, then the lower object index.
    """
    if not boxes:
        raise ValidationError("assign_points needs at least one box")
    owner = np.empty(sketch.n, dtype=np.intp)
    for k, s in enumerate(sketch.strokes):
        center = stroke_center(s)
        best_j = 0
        best_key = (float("inf"), float("inf"), 0)
        for j, box in enumerate(boxes):
            key = (box.distance_to(center), box.area, j)
            if key < best_key:
                best_key, best_j = key, j
        owner[4 * k:4 * k + 4] = best_j
    return PointAssignment(owner)
