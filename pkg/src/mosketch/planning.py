"""Motion planning: plan validation and the coarse per-point motion gather.

The planner proposes per-object bounding boxes for every frame. After
validation, each object's frame-0 box is overwritten with its detected
initial box, so motion always starts from where the object actually is.
The gather step turns box motion into per-point displacements by mapping
every owned point through the axis-aligned affine that carries the
initial box to the frame-t box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clients import TEMPLATE_MOTION_PLAN, PlannerClient, encode_image
from .errors import PlanValidationError, ShapeError, ValidationError
from .scene import BoundingBox, PointAssignment
from .sketch import Trajectory, VectorSketch


@dataclass(frozen=True)
class MotionPlan:
    """Validated per-object, per-frame boxes (m, f, 4) plus initial boxes."""

    objects: tuple[str, ...]
    boxes: np.ndarray      # (m, f, 4) as [x, y, w, h]
    initial: np.ndarray    # (m, 4)
    reasoning: str = ""

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=np.float64)
        initial = np.array(self.initial, dtype=np.float64)
        m = len(self.objects)
        if boxes.ndim != 3 or boxes.shape[0] != m or boxes.shape[2] != 4:
            raise ShapeError(f"plan boxes must be ({m}, f, 4), got {boxes.shape}")
        if initial.shape != (m, 4):
            raise ShapeError(f"initial boxes must be ({m}, 4), got {initial.shape}")
        if not np.isfinite(boxes).all() or not np.isfinite(initial).all():
            raise ValidationError("plan contains non-finite box values")
        if (boxes[:, :, 2:] < 0).any() or (initial[:, 2:] < 0).any():
            raise ValidationError("plan box extents must be >= 0")
        boxes.flags.writeable = False
        initial.flags.writeable = False
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "initial", initial)

    @property
    def m(self) -> int:
        return len(self.objects)

    @property
    def f(self) -> int:
        return self.boxes.shape[1]

    def box(self, j: int, t: int) -> BoundingBox:
        return BoundingBox(*self.boxes[j, t])

    def to_json(self) -> dict:
        return {
            "objects": list(self.objects),
            "f": self.f,
            "initial": self.initial.tolist(),
            "boxes": self.boxes.tolist(),
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_json(cls, data: dict) -> "MotionPlan":
        return cls(tuple(data["objects"]), np.array(data["boxes"]),
                   np.array(data["initial"]), data.get("reasoning", ""))


def save_plan(plan: MotionPlan, path: str | Path):
    Path(path).write_text(json.dumps(plan.to_json(), indent=2))


def load_plan(path: str | Path) -> MotionPlan:
    return MotionPlan.from_json(json.loads(Path(path).read_text()))


def _validate_plan_response(raw: dict, objects: tuple[str, ...], f: int):
    """Returns (m, f, 4) boxes in object order; raises with the offending path."""
    if not isinstance(raw, dict):
        raise PlanValidationError("planner response is not a JSON object", raw=raw)
    plan_items = raw.get("plan")
    if not isinstance(plan_items, list):
        raise PlanValidationError("plan: missing or not a list", raw=raw)
    by_name: dict[str, list] = {}
    for i, item in enumerate(plan_items):
        if not isinstance(item, dict) or "object" not in item:
            raise PlanValidationError(f"plan[{i}]: missing 'object'", raw=raw)
        by_name[item["object"]] = (i, item.get("boxes"))
    boxes = np.zeros((len(objects), f, 4), dtype=np.float64)
    for j, name in enumerate(objects):
        if name not in by_name:
            raise PlanValidationError(f"plan: missing object {name!r}", raw=raw)
        i, entry = by_name[name]
        if not isinstance(entry, list):
            raise PlanValidationError(f"plan[{i}].boxes: missing or not a list", raw=raw)
        if len(entry) != f:
            raise PlanValidationError(
                f"plan[{i}].boxes: expected {f} frames, got {len(entry)}", raw=raw)
        for t, b in enumerate(entry):
            if (not isinstance(b, list) or len(b) != 4
                    or not all(isinstance(v, (int, float)) for v in b)):
                raise PlanValidationError(
                    f"plan[{i}].boxes[{t}]: expected [x, y, w, h]", raw=raw)
            if not all(math.isfinite(float(v)) for v in b):
                raise PlanValidationError(
                    f"plan[{i}].boxes[{t}]: non-finite value", raw=raw)
            if float(b[2]) < 0 or float(b[3]) < 0:
                raise PlanValidationError(
                    f"plan[{i}].boxes[{t}]: negative extent", raw=raw)
            boxes[j, t] = [float(v) for v in b]
    return boxes


def plan_motion(image_png: bytes, instruction: str, b0: list[BoundingBox],
                objects: tuple[str, ...], planner: PlannerClient, f: int,
                canvas: tuple[float, float],
                attempts: int = 3) -> tuple[MotionPlan, dict]:
    """Request and validate a motion plan; frame 0 is forced to the initial boxes.

    Returns the plan plus the raw response for transcripting. Invalid
    responses are re-requested up to `attempts` times; the last validation
    error is raised if all fail.
    """
    if len(b0) != len(objects):
        raise ValidationError(f"{len(b0)} initial boxes for {len(objects)} objects")
    request = {
        "image": encode_image(image_png),
        "instruction": instruction,
        "template_id": TEMPLATE_MOTION_PLAN,
        "canvas": [canvas[0], canvas[1]],
        "frames": f,
        "objects": [
            {"name": name, "box": list(box.as_array())}
            for name, box in zip(objects, b0)
        ],
    }
    last: PlanValidationError | None = None
    for _ in range(attempts):
        raw = planner.complete(request)
        try:
            boxes = _validate_plan_response(raw, objects, f)
        except PlanValidationError as e:
            last = e
            continue
        initial = np.stack([b.as_array() for b in b0])
        boxes = boxes.copy()
        boxes[:, 0, :] = initial  # anchor the animation to detected positions
        reasoning = raw.get("reasoning", "") if isinstance(raw, dict) else ""
        if not isinstance(reasoning, str):
            reasoning = ""
        return MotionPlan(objects, boxes, initial, reasoning), raw
    raise last


def gather_coarse_motion(assignment: PointAssignment, sketch: VectorSketch,
                         plan: MotionPlan) -> Trajectory:
    """Coarse displacements: each point rides its object's box trajectory.

    For point (x, y) owned by object j with initial box (x0, y0, w0, h0)
    and frame-t box (xt, yt, wt, ht):
        x' = xt + (x - x0) * (wt / w0),  y' = yt + (y - y0) * (ht / h0)
    A zero-extent initial axis degrades to scale 1 (translation only).
    """
    if assignment.n != sketch.n:
        raise ShapeError(f"assignment covers {assignment.n} points, sketch has {sketch.n}")
    pts = sketch.points.astype(np.float64)  # (n, 2)
    f, m = plan.f, plan.m
    disp = np.zeros((sketch.n, f, 2), dtype=np.float64)
    for j in range(m):
        idx = assignment.points_of(j)
        if idx.size == 0:
            continue
        x0, y0, w0, h0 = plan.initial[j]
        bt = plan.boxes[j]  # (f, 4)
        sx = bt[:, 2] / w0 if w0 > 0 else np.ones(f)
        sy = bt[:, 3] / h0 if h0 > 0 else np.ones(f)
        px = pts[idx, 0][:, None]  # (k, 1)
        py = pts[idx, 1][:, None]
        nx = bt[None, :, 0] + (px - x0) * sx[None, :]
        ny = bt[None, :, 1] + (py - y0) * sy[None, :]
        disp[idx, :, 0] = nx - px
        disp[idx, :, 1] = ny - py
    return Trajectory(disp.astype(np.float32))
