"""Vector sketch data model, cubic Bézier geometry, and SVG import/export.

A sketch is an ordered list of strokes; each stroke is one cubic Bézier
curve with four control points in canvas units (origin top-left, y down).
Control points are never shared between strokes, so the flat point matrix
has n = 4 * stroke count rows and point p belongs to stroke p // 4,
slot p % 4.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ShapeError,
    SvgFormatError,
    UnsupportedSvgFeatureError,
    UsageError,
    ValidationError,
)

DTYPE = np.float32


def _frozen(arr: np.ndarray, shape: tuple, what: str) -> np.ndarray:
    arr = np.array(arr, dtype=DTYPE)
    if arr.shape != shape:
        raise ShapeError(f"{what} must have shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{what} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Stroke:
    """One cubic Bézier curve: exactly four control points plus a width."""

    control_points: np.ndarray
    width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "control_points",
                           _frozen(self.control_points, (4, 2), "control_points"))
        if not (self.width > 0 and np.isfinite(self.width)):
            raise ValidationError(f"stroke width must be > 0, got {self.width}")


@dataclass(frozen=True)
class VectorSketch:
    """Ordered strokes plus the canvas extent (width, height) in pixels."""

    strokes: tuple[Stroke, ...]
    canvas: tuple[float, float] = (256.0, 256.0)

    def __post_init__(self):
        object.__setattr__(self, "strokes", tuple(self.strokes))
        cw, ch = self.canvas
        if not (cw > 0 and ch > 0):
            raise ValidationError(f"canvas dimensions must be positive, got {self.canvas}")
        object.__setattr__(self, "canvas", (float(cw), float(ch)))

    @property
    def n(self) -> int:
        return 4 * len(self.strokes)

    @property
    def points(self) -> np.ndarray:
        """All control points stacked, shape (n, 2). Point p -> stroke p//4, slot p%4."""
        if not self.strokes:
            return np.zeros((0, 2), dtype=DTYPE)
        return np.concatenate([s.control_points for s in self.strokes], axis=0)

    def with_points(self, points: np.ndarray) -> "VectorSketch":
        """Same strokes and canvas, control points replaced from a flat (n, 2) array."""
        points = np.asarray(points, dtype=DTYPE)
        if points.shape != (self.n, 2):
            raise ShapeError(f"expected points of shape ({self.n}, 2), got {points.shape}")
        strokes = tuple(
            Stroke(points[4 * k:4 * k + 4], width=s.width)
            for k, s in enumerate(self.strokes)
        )
        return VectorSketch(strokes, self.canvas)


@dataclass(frozen=True)
class Trajectory:
    """Per-point, per-frame control point displacements, shape (n, f, 2)."""

    displacements: np.ndarray

    def __post_init__(self):
        arr = np.array(self.displacements, dtype=DTYPE)
        if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[1] < 1:
            raise ShapeError(f"displacements must be (n, f, 2), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("trajectory contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "displacements", arr)

    @property
    def n(self) -> int:
        return self.displacements.shape[0]

    @property
    def f(self) -> int:
        return self.displacements.shape[1]

    @classmethod
    def zeros(cls, n: int, f: int) -> "Trajectory":
        return cls(np.zeros((n, f, 2), dtype=DTYPE))


# Bernstein basis for a cubic: row = [ (1-t)^3, 3(1-t)^2 t, 3(1-t) t^2, t^3 ].
def bernstein_weights(ts: np.ndarray) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.float64)
    u = 1.0 - ts
    return np.stack([u ** 3, 3 * u ** 2 * ts, 3 * u * ts ** 2, ts ** 3], axis=-1)


def bezier_point(stroke: Stroke, t: float) -> np.ndarray:
    """Evaluate the cubic at parameter t in [0, 1]."""
    if not (0.0 <= t <= 1.0):
        raise UsageError(f"bezier parameter must be in [0, 1], got {t}")
    w = bernstein_weights(np.float64(t))
    return (w @ stroke.control_points.astype(np.float64)).astype(DTYPE)


def stroke_center(stroke: Stroke) -> np.ndarray:
    """The curve point at t = 0.5 (visual center, not the control point mean)."""
    return bezier_point(stroke, 0.5)


def apply_trajectory(sketch: VectorSketch, traj: Trajectory, t: int) -> VectorSketch:
    """The sketch at frame t: every point shifted by displacements[p][t]."""
    if traj.n != sketch.n:
        raise ShapeError(f"trajectory has {traj.n} points, sketch has {sketch.n}")
    if not (0 <= t < traj.f):
        raise ShapeError(f"frame index {t} outside [0, {traj.f})")
    return sketch.with_points(sketch.points + traj.displacements[:, t, :])


# -- SVG import/export ------------------------------------------------------

_NUM = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")
_TOKEN = re.compile(r"([MmCcLlHhVvSsQqTtAaZz])|" + _NUM.pattern)


def _tokenize_path(d: str):
    for m in _TOKEN.finditer(d):
        if m.group(1):
            yield m.group(1)
        else:
            yield float(m.group(0))


def load_svg(path) -> VectorSketch:
    """Read and parse an SVG file."""
    from pathlib import Path

    return parse_svg(Path(path).read_bytes())


def parse_svg(data: bytes | str) -> VectorSketch:
    """Parse the supported SVG subset: paths of absolute M + C commands only.

    A path may chain several C segments; each cubic segment becomes its own
    Stroke, re-using the running current point as the segment's first
    control point. Canvas comes from the root viewBox.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        raise SvgFormatError(f"not parseable as XML: {e}") from e
    viewbox = root.get("viewBox")
    if viewbox is None:
        raise SvgFormatError("SVG is missing the required viewBox attribute")
    vb = viewbox.replace(",", " ").split()
    if len(vb) != 4:
        raise SvgFormatError(f"malformed viewBox: {viewbox!r}")
    canvas = (float(vb[2]), float(vb[3]))

    strokes: list[Stroke] = []
    for el in root.iter():
        if el.tag.rsplit("}", 1)[-1] != "path":
            continue
        d = el.get("d", "")
        width = float(el.get("stroke-width", "1.0"))
        tokens = list(_tokenize_path(d))
        i = 0
        current: np.ndarray | None = None
        while i < len(tokens):
            tok = tokens[i]
            if not isinstance(tok, str):
                raise UnsupportedSvgFeatureError(
                    "implicit lineto" if current is not None else "leading coordinates")
            if tok == "M":
                if i + 2 >= len(tokens) or any(isinstance(tokens[j], str) for j in (i + 1, i + 2)):
                    raise SvgFormatError(f"M command needs two coordinates in {d!r}")
                current = np.array([tokens[i + 1], tokens[i + 2]], dtype=np.float64)
                i += 3
            elif tok == "C":
                if current is None:
                    raise SvgFormatError(f"C before any M in {d!r}")
                i += 1
                took_any = False
                while i + 5 < len(tokens) and all(
                        not isinstance(tokens[j], str) for j in range(i, i + 6)):
                    nums = tokens[i:i + 6]
                    pts = np.array([
                        current,
                        [nums[0], nums[1]],
                        [nums[2], nums[3]],
                        [nums[4], nums[5]],
                    ])
                    strokes.append(Stroke(pts, width=width))
                    current = pts[3]
                    i += 6
                    took_any = True
                if not took_any:
                    raise SvgFormatError(f"C command needs six coordinates in {d!r}")
            else:
                raise UnsupportedSvgFeatureError(tok)
    return VectorSketch(tuple(strokes), canvas)


def write_svg(sketch: VectorSketch) -> bytes:
    """Serialize to the supported subset; parse_svg(write_svg(s)) == s to 1e-6."""
    cw, ch = sketch.canvas
    def fmt(v: float) -> str:
        return f"{v:.6f}"
    lines = [
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {fmt(cw)} {fmt(ch)}">'
    ]
    for s in sketch.strokes:
        p = s.control_points
        d = (f"M {fmt(p[0, 0])} {fmt(p[0, 1])} "
             f"C {fmt(p[1, 0])} {fmt(p[1, 1])} "
             f"{fmt(p[2, 0])} {fmt(p[2, 1])} "
             f"{fmt(p[3, 0])} {fmt(p[3, 1])}")
        lines.append(
            f'  <path d="{d}" fill="none" stroke="black" '
            f'stroke-width="{fmt(s.width)}" stroke-linecap="round"/>')
    lines.append("</svg>")
    return ("\n".join(lines) + "\n").encode("utf-8")


# -- animation export -------------------------------------------------------

def frame_name(t: int, f: int, ext: str) -> str:
    width = max(2, len(str(f - 1)))
    return f"frame_{t:0{width}d}.{ext}"


def export_animation(sketch: VectorSketch, traj: Trajectory, fmt: str,
                     out_dir: str | Path, fps: int = 10,
                     sigma: float | None = None) -> list[Path]:
    """Write the animation to out_dir; returns the files written, in order.

    Formats: "svg-sequence" (one SVG per frame), "png-sequence" (8-bit
    grayscale, ink on white), "gif" (GIF89a at fps). Output bytes are
    deterministic for identical inputs.
    """
    from . import raster  # deferred: raster imports this module's types

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    f = traj.f
    if fmt == "svg-sequence":
        paths = []
        for t in range(f):
            p = out_dir / frame_name(t, f, "svg")
            p.write_bytes(write_svg(apply_trajectory(sketch, traj, t)))
            paths.append(p)
        return paths

    if fmt not in ("png-sequence", "gif"):
        raise UsageError(f"unknown animation format: {fmt!r}")

    cw, ch = sketch.canvas
    H, W = int(round(ch)), int(round(cw))
    if sigma is None:
        sigma = raster.default_sigma(H, W)
    images = []
    for t in range(f):
        frame = apply_trajectory(sketch, traj, t)
        ink = raster.rasterize_f64(frame.points, frame.canvas, H, W, sigma)
        gray = np.clip(np.round(255.0 * (1.0 - ink)), 0, 255).astype(np.uint8)
        images.append(gray)

    from PIL import Image

    if fmt == "png-sequence":
        paths = []
        for t, gray in enumerate(images):
            p = out_dir / frame_name(t, f, "png")
            Image.fromarray(gray, mode="L").save(p, format="PNG")
            paths.append(p)
        return paths

    pil = [Image.fromarray(g, mode="L") for g in images]
    p = out_dir / "animation.gif"
    pil[0].save(p, format="GIF", save_all=True, append_images=pil[1:],
                duration=int(round(1000 / fps)), loop=0)
    return [p]
