"""Soft differentiable rasterizer from control points to grayscale ink.

Each stroke is sampled into a 16-segment polyline (17 Bézier samples).
A pixel's coverage by one segment is exp(-d^2 / (2 sigma^2)) with d the
distance from the pixel center to the segment; segment coverages composite
as ink = 1 - prod(1 - c). The whole map is differentiable in the control
points; the backward pass is hand-derived and vectorized, treating the
closest-point parameter u as locally constant (valid at the minimizer,
including the clamped endpoints).

Internals run in float64 for gradient-check headroom; tensor outputs are
float32 like the rest of the graph.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError
from .sketch import VectorSketch, bernstein_weights

SEGMENTS_PER_STROKE = 16
_SAMPLE_TS = np.linspace(0.0, 1.0, SEGMENTS_PER_STROKE + 1)
_BERNSTEIN = bernstein_weights(_SAMPLE_TS)  # (17, 4)
_EPS_LEN2 = 1e-12
_EPS_ONE_MINUS = 1e-12


def default_sigma(H: int, W: int) -> float:
    """1.5 px at 256 resolution, scaled proportionally."""
    return 1.5 * min(H, W) / 256.0


def _check_raster_args(H: int, W: int, sigma: float):
    if not (sigma > 0):
        raise UsageError(f"sigma must be > 0, got {sigma}")
    if H < 8 or W < 8:
        raise UsageError(f"resolution must be at least 8x8, got {H}x{W}")


def _segments(points: np.ndarray, canvas: tuple[float, float],
              H: int, W: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel-space polyline samples and segment endpoints.

    Returns (samples (k,17,2), A (K,2), B (K,2)) with K = 16k.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] % 4 != 0:
        raise ShapeError(f"points must be (4k, 2), got {pts.shape}")
    k = pts.shape[0] // 4
    cw, ch = canvas
    scale = np.array([W / cw, H / ch], dtype=np.float64)
    cp = (pts * scale).reshape(k, 4, 2)
    samples = np.einsum("ta,kab->ktb", _BERNSTEIN, cp)
    A = samples[:, :-1].reshape(-1, 2)
    B = samples[:, 1:].reshape(-1, 2)
    return samples, A, B


def _grid(H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2).astype(np.float64)


def _chunk_size(H: int, W: int) -> int:
    return max(4, min(256, int(6e6 // max(1, H * W))))


def _forward_f64(points: np.ndarray, canvas: tuple[float, float], H: int,
                 W: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (ink flat (H*W,), prod of (1 - c) flat) in float64."""
    _check_raster_args(H, W, sigma)
    if np.asarray(points).shape[0] == 0:
        flat = np.zeros(H * W, dtype=np.float64)
        return flat, np.ones(H * W, dtype=np.float64)
    _, A, B = _segments(points, canvas, H, W)
    g = _grid(H, W)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    logsum = np.zeros(H * W, dtype=np.float64)
    step = _chunk_size(H, W)
    for lo in range(0, A.shape[0], step):
        a, b = A[lo:lo + step], B[lo:lo + step]
        e = b - a
        len2 = np.maximum((e * e).sum(axis=1), _EPS_LEN2)
        w = g[:, None, :] - a[None, :, :]
        u = np.clip((w * e[None, :, :]).sum(axis=2) / len2[None, :], 0.0, 1.0)
        diff = w - u[:, :, None] * e[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        c = np.exp(-d2 * inv2s2)
        logsum += np.log(np.maximum(1.0 - c, _EPS_ONE_MINUS)).sum(axis=1)
    prod = np.exp(logsum)
    return 1.0 - prod, prod


def rasterize_f64(points: np.ndarray, canvas: tuple[float, float], H: int,
                  W: int, sigma: float) -> np.ndarray:
    """Forward-only rasterization, float64 image of shape (H, W)."""
    ink, _ = _forward_f64(points, canvas, H, W, sigma)
    return ink.reshape(H, W)


def _backward_points(points: np.ndarray, canvas: tuple[float, float], H: int,
                     W: int, sigma: float, prod: np.ndarray,
                     g_pixels: np.ndarray) -> np.ndarray:
    """d(sum g_pixels * ink)/d(points), shape (n, 2), float64.

    Per segment: d(ink)/d(d2) = -prod_{j != k}(1 - c_j) * c_k / (2 sigma^2),
    then d(d2)/dA = 2 (closest - g)(1 - u), d(d2)/dB = 2 (closest - g) u.
    """
    n = np.asarray(points).shape[0]
    if n == 0:
        return np.zeros((0, 2), dtype=np.float64)
    samples, A, B = _segments(points, canvas, H, W)
    k = samples.shape[0]
    g = _grid(H, W)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    gp = g_pixels.reshape(-1).astype(np.float64)
    grad_samples = np.zeros((k, SEGMENTS_PER_STROKE + 1, 2), dtype=np.float64)
    gA_flat = np.zeros((A.shape[0], 2), dtype=np.float64)
    gB_flat = np.zeros((A.shape[0], 2), dtype=np.float64)
    step = _chunk_size(H, W)
    for lo in range(0, A.shape[0], step):
        a, b = A[lo:lo + step], B[lo:lo + step]
        e = b - a
        len2 = np.maximum((e * e).sum(axis=1), _EPS_LEN2)
        w = g[:, None, :] - a[None, :, :]
        u = np.clip((w * e[None, :, :]).sum(axis=2) / len2[None, :], 0.0, 1.0)
        diff = w - u[:, :, None] * e[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        c = np.exp(-d2 * inv2s2)
        one_minus = np.maximum(1.0 - c, _EPS_ONE_MINUS)
        # prod over j != k, computed from the stored total product
        others = prod[:, None] / one_minus
        g_d2 = gp[:, None] * (-others * c * inv2s2)
        # closest - g = -diff
        cg = -2.0 * diff
        base = g_d2[:, :, None] * cg
        gA_flat[lo:lo + step] = (base * (1.0 - u)[:, :, None]).sum(axis=0)
        gB_flat[lo:lo + step] = (base * u[:, :, None]).sum(axis=0)
    gA = gA_flat.reshape(k, SEGMENTS_PER_STROKE, 2)
    gB = gB_flat.reshape(k, SEGMENTS_PER_STROKE, 2)
    grad_samples[:, :-1] += gA
    grad_samples[:, 1:] += gB
    cw, ch = canvas
    scale = np.array([W / cw, H / ch], dtype=np.float64)
    grad_cp = np.einsum("ta,ktb->kab", _BERNSTEIN, grad_samples) * scale
    return grad_cp.reshape(n, 2)


def rasterize(points: Tensor, canvas: tuple[float, float], H: int, W: int,
              sigma: float) -> Tensor:
    """Differentiable rasterization of one frame; output (H, W) in [0, 1]."""
    pts_np = points.data
    ink, prod = _forward_f64(pts_np, canvas, H, W, sigma)
    pts_snapshot = pts_np.copy()

    def backward(g):
        if points.requires_grad:
            grad = _backward_points(pts_snapshot, canvas, H, W, sigma, prod, g)
            points._accumulate(grad.astype(np.float32))

    return ad.from_op(ink.reshape(H, W).astype(np.float32), (points,),
                      backward, "rasterize")


def frame_positions(sketch: VectorSketch, traj: Tensor, t: int) -> Tensor:
    """Base control points plus displacement slice t, shape (n, 2)."""
    base = Tensor(sketch.points)
    return ad.add(base, ad.slice_(traj, (slice(None), t)))


def rasterize_stack(sketch: VectorSketch, traj: Tensor, H: int, W: int,
                    sigma: float) -> Tensor:
    """All f frames rasterized, shape (f, H, W)."""
    if traj.data.ndim != 3 or traj.shape[0] != sketch.n or traj.shape[2] != 2:
        raise ShapeError(f"trajectory shape {traj.shape} does not fit sketch n={sketch.n}")
    f = traj.shape[1]
    frames = []
    for t in range(f):
        img = rasterize(frame_positions(sketch, traj, t), sketch.canvas, H, W, sigma)
        frames.append(ad.reshape(img, (1, H, W)))
    return ad.concat(frames, axis=0)


def _subset_strokes(subset: np.ndarray, n: int) -> np.ndarray:
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        raise UsageError("point subset is empty")
    if subset.min() < 0 or subset.max() >= n:
        raise UsageError(f"point subset out of range [0, {n})")
    strokes = np.unique(subset // 4)
    covered = np.sort(np.concatenate([4 * strokes + s for s in range(4)]))
    if not np.array_equal(np.unique(subset), covered):
        raise UsageError("point subset must cover whole strokes")
    return strokes


def crop_subvideo(sketch: VectorSketch, traj: Tensor, subset: np.ndarray,
                  H: int, W: int, sigma: float, margin: float = 0.1) -> Tensor:
    """Render only the subset's strokes, re-framed to fill the canvas.

    The union over frames of the subset's bounding box, inflated by the
    margin fraction, is mapped onto the canvas by one similarity transform
    (shared by all frames): p' = (p - box_center) * s + canvas_center with
    s = min(cw / w', ch / h'). The transform is part of the graph, so
    gradients flow through the box extremes as well as the points.
    """
    n = sketch.n
    strokes = _subset_strokes(subset, n)
    point_idx = np.sort(np.concatenate([4 * strokes + s for s in range(4)]))
    f = traj.shape[1]
    base = sketch.points[point_idx]  # (ns, 2)
    sub_traj = ad.gather_rows(traj, point_idx)  # (ns, f, 2)
    positions = ad.add(Tensor(base[:, None, :]), sub_traj)  # (ns, f, 2)

    flat = ad.reshape(positions, (-1, 2))
    q = flat.data
    ix_min, ix_max = int(q[:, 0].argmin()), int(q[:, 0].argmax())
    iy_min, iy_max = int(q[:, 1].argmin()), int(q[:, 1].argmax())
    x_min = flat[ix_min, 0]
    x_max = flat[ix_max, 0]
    y_min = flat[iy_min, 1]
    y_max = flat[iy_max, 1]

    cw, ch = sketch.canvas
    # + eps guards a zero-extent union box (degenerate subset)
    w_inf = ad.add(ad.mul(x_max - x_min, 1.0 + margin), 1e-6)
    h_inf = ad.add(ad.mul(y_max - y_min, 1.0 + margin), 1e-6)
    sx = ad.div(Tensor(np.float32(cw)), w_inf)
    sy = ad.div(Tensor(np.float32(ch)), h_inf)
    s = sx if float(sx.data) <= float(sy.data) else sy
    cx = ad.mul(ad.add(x_min, x_max), 0.5)
    cy = ad.mul(ad.add(y_min, y_max), 0.5)
    box_center = ad.concat([ad.reshape(cx, (1,)), ad.reshape(cy, (1,))], axis=0)
    canvas_center = Tensor(np.array([cw / 2.0, ch / 2.0], dtype=np.float32))
    transformed = ad.add(ad.mul(positions - box_center, s), canvas_center)

    frames = []
    for t in range(f):
        pts_t = ad.slice_(transformed, (slice(None), t))
        img = rasterize(pts_t, sketch.canvas, H, W, sigma)
        frames.append(ad.reshape(img, (1, H, W)))
    return ad.concat(frames, axis=0)
