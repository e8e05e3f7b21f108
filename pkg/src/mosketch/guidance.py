"""Guidance providers and the compositional loss.

One optimization step issues a full-video request plus one request per
sub-instruction, each rendered from only that instruction's points and
re-framed. Providers return a scalar loss and a gradient in one of two
spaces: "trajectory" gradients are d(loss)/d(dz) rows and are applied
directly (rows outside the request's subset contribute nothing);
"pixel" gradients are d(loss)/d(pixels) and are pulled back through the
differentiable rasterizer. Per-term gradients are summed with unit
weights by default.

The sum is materialized as a scalar graph node (the carrier): for each
term, sum(output * constant_gradient); calling backward() on the carrier
chains every term's gradient through the network in one pass.
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import autodiff as ad
from . import raster
from .autodiff import Tensor
from .errors import (
    DecompositionError,
    ProtocolError,
    ShapeError,
    StepError,
    ValidationError,
)
from .scene import PointAssignment
from .sketch import VectorSketch

PROTOCOL_VERSION = 1
SDS_DEFAULT_PARAMS = {"t_min": 0.02, "t_max": 0.98, "cfg_scale": 100}


@dataclass(frozen=True)
class GuidanceRequest:
    prompt: str
    kind: str                       # "full" | "sub"
    index: int | None               # sub-instruction index, None for full
    seed: int
    step: int
    dz: np.ndarray                  # (n, f, 2) current trajectory values
    subset: np.ndarray | None       # point indices for sub requests
    frames: np.ndarray | None       # (f, H, W) for pixel-space providers

    def __post_init__(self):
        if not self.prompt:
            raise ValidationError("guidance request needs a non-empty prompt")
        if self.kind not in ("full", "sub"):
            raise ValidationError(f"unknown request kind {self.kind!r}")

    @property
    def name(self) -> str:
        return "full" if self.kind == "full" else f"sub[{self.index}]"


@dataclass(frozen=True)
class GuidanceResult:
    loss: float
    gradient: np.ndarray
    space: str                      # "pixel" | "trajectory"
    provider_id: str


class GuidanceProvider(Protocol):
    provider_id: str
    gradient_space: str

    def evaluate(self, request: GuidanceRequest) -> GuidanceResult: ...


def subset_for_instruction(assignment: PointAssignment,
                           object_indices: tuple[int, ...]) -> np.ndarray:
    """Union of the instruction's objects' points; never other objects'."""
    parts = [assignment.points_of(j) for j in object_indices]
    union = np.unique(np.concatenate(parts)) if parts else np.array([], dtype=np.intp)
    if union.size == 0:
        raise DecompositionError(
            f"sub-instruction over objects {list(object_indices)} selects no points")
    return union


# -- analytic oracles (trajectory space) -------------------------------------

class TrajectoryTargetOracle:
    """loss = 1/2 ||dz - target||^2 over the request's rows; exact gradient."""

    gradient_space = "trajectory"

    def __init__(self, target: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)
        self.provider_id = "analytic:target"

    def evaluate(self, request: GuidanceRequest) -> GuidanceResult:
        dz = np.asarray(request.dz, dtype=np.float64)
        if dz.shape != self.target.shape:
            raise ShapeError(f"dz shape {dz.shape} != target {self.target.shape}")
        diff = dz - self.target
        mask = np.zeros(dz.shape[0], dtype=bool)
        if request.subset is None:
            mask[:] = True
        else:
            mask[request.subset] = True
        diff = diff * mask[:, None, None]
        loss = 0.5 * float((diff * diff).sum())
        return GuidanceResult(loss, diff.astype(np.float32), "trajectory",
                              self.provider_id)


class BboxFollowOracle:
    """Penalizes per-frame object centroid distance to the plan's box centers.

    loss = 1/2 sum_j sum_t ||centroid_j(t) - box_center_j(t)||^2 over the
    objects wholly inside the request's subset; each point of object j at
    frame t receives gradient (centroid - center) / |P_j|.
    """

    gradient_space = "trajectory"

    def __init__(self, sketch: VectorSketch, assignment: PointAssignment, plan):
        self.base = sketch.points.astype(np.float64)
        self.groups = [assignment.points_of(j) for j in range(plan.m)]
        self.centers = np.stack([
            plan.boxes[j, :, :2] + plan.boxes[j, :, 2:] / 2.0
            for j in range(plan.m)
        ])  # (m, f, 2)
        self.provider_id = "analytic:bbox"

    def evaluate(self, request: GuidanceRequest) -> GuidanceResult:
        dz = np.asarray(request.dz, dtype=np.float64)
        in_subset = np.zeros(dz.shape[0], dtype=bool)
        if request.subset is None:
            in_subset[:] = True
        else:
            in_subset[request.subset] = True
        grad = np.zeros_like(dz)
        loss = 0.0
        for j, idx in enumerate(self.groups):
            if idx.size == 0 or not in_subset[idx].all():
                continue
            pos = self.base[idx][:, None, :] + dz[idx]  # (k, f, 2)
            centroid = pos.mean(axis=0)  # (f, 2)
            resid = centroid - self.centers[j]
            loss += 0.5 * float((resid * resid).sum())
            grad[idx] = resid[None, :, :] / idx.size
        return GuidanceResult(loss, grad.astype(np.float32), "trajectory",
                              self.provider_id)


class SmoothnessOracle:
    """loss = lam * sum_t ||dz[:, t+1] - dz[:, t]||^2 over the subset rows."""

    gradient_space = "trajectory"

    def __init__(self, lam: float = 1.0):
        self.lam = float(lam)
        self.provider_id = "analytic:smoothness"

    def evaluate(self, request: GuidanceRequest) -> GuidanceResult:
        dz = np.asarray(request.dz, dtype=np.float64)
        mask = np.zeros(dz.shape[0], dtype=bool)
        if request.subset is None:
            mask[:] = True
        else:
            mask[request.subset] = True
        d = dz[:, 1:, :] - dz[:, :-1, :]
        d = d * mask[:, None, None]
        loss = self.lam * float((d * d).sum())
        grad = np.zeros_like(dz)
        grad[:, :-1, :] -= 2.0 * self.lam * d
        grad[:, 1:, :] += 2.0 * self.lam * d
        return GuidanceResult(loss, grad.astype(np.float32), "trajectory",
                              self.provider_id)


# -- sidecar provider (pixel space) ------------------------------------------

def encode_frames(frames: np.ndarray) -> str:
    """Frame-major, row-major, little-endian float32, base64."""
    return base64.b64encode(
        np.ascontiguousarray(frames, dtype="<f4").tobytes()).decode("ascii")


def decode_frames(data: str, shape: tuple) -> np.ndarray:
    raw = base64.b64decode(data)
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise ProtocolError(f"payload is {len(raw)} bytes, expected {expect} "
                            f"for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def build_sds_request(prompt: str, frames: np.ndarray, seed: int, step: int,
                      params: dict | None = None) -> dict:
    f, h, w = frames.shape
    return {
        "protocol": PROTOCOL_VERSION,
        "prompt": prompt,
        "shape": [int(f), int(h), int(w)],
        "frames": encode_frames(frames),
        "seed": int(seed),
        "step": int(step),
        "params": dict(SDS_DEFAULT_PARAMS if params is None else params),
    }


class SidecarProvider:
    """HTTP client for the score-distillation sidecar (wire protocol v1)."""

    gradient_space = "pixel"

    def __init__(self, base_url: str, params: dict | None = None,
                 timeout: float = 120.0, attempts: int = 3):
        self.base_url = base_url.rstrip("/")
        self.params = dict(SDS_DEFAULT_PARAMS if params is None else params)
        self.timeout = timeout
        self.attempts = attempts
        self.provider_id = f"sidecar:{self.base_url}"

    def health(self) -> dict:
        import requests

        try:
            resp = requests.get(f"{self.base_url}/v1/health", timeout=self.timeout)
            body = resp.json()
        except Exception as e:
            raise StepError(f"sidecar health check failed: {e}") from e
        if body.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"sidecar speaks protocol {body.get('protocol')}, "
                f"client requires {PROTOCOL_VERSION}")
        return body

    def evaluate(self, request: GuidanceRequest) -> GuidanceResult:
        import requests

        if request.frames is None:
            raise ValidationError("pixel-space provider needs rendered frames")
        payload = build_sds_request(request.prompt, request.frames,
                                    request.seed, request.step, self.params)
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                resp = requests.post(f"{self.base_url}/v1/sds", json=payload,
                                     timeout=self.timeout)
            except Exception as e:
                last = StepError(f"sidecar request failed: {e}")
            else:
                if resp.status_code >= 500:
                    last = StepError(f"sidecar returned {resp.status_code}")
                elif resp.status_code >= 400:
                    raise ProtocolError(
                        f"sidecar rejected request: {resp.status_code} {resp.text[:200]}")
                else:
                    try:
                        body = resp.json()
                        grad = decode_frames(body["grad"], request.frames.shape)
                        loss = float(body["loss"])
                    except ProtocolError:
                        raise
                    except Exception as e:
                        raise ProtocolError(f"malformed sidecar response: {e}") from e
                    return GuidanceResult(loss, grad, "pixel",
                                          body.get("model_id", self.provider_id))
            if attempt < self.attempts - 1:
                time.sleep(0.2 * 2 ** attempt)
        raise last


# -- compositional aggregation -----------------------------------------------

@dataclass(frozen=True)
class TermReport:
    name: str
    prompt: str
    loss: float
    weight: float
    grad_max_abs: float


@dataclass(frozen=True)
class CompositionalResult:
    carrier: Tensor          # scalar node; backward() applies the summed gradient
    total_loss: float
    terms: tuple[TermReport, ...]


def _check_result(result: GuidanceResult, request: GuidanceRequest,
                  expect_space: str, expect_shape: tuple):
    if result.space != expect_space:
        raise ProtocolError(f"{request.name}: provider produced a "
                            f"{result.space}-space gradient, declared {expect_space}")
    if result.gradient.shape != expect_shape:
        raise ProtocolError(f"{request.name}: gradient shape "
                            f"{result.gradient.shape}, expected {expect_shape}")
    if not np.isfinite(result.gradient).all() or not np.isfinite(result.loss):
        raise StepError(f"non-finite guidance gradient for request {request.name}")


def compositional_loss(dz: Tensor, sketch: VectorSketch, prompt: str,
                       sub_prompts: list[tuple[str, np.ndarray]],
                       provider: GuidanceProvider, *, hw: tuple[int, int] = (64, 64),
                       sigma: float | None = None, margin: float = 0.1,
                       seed: int = 0, step: int = 0,
                       weights: list[float] | None = None) -> CompositionalResult:
    """Full-video term plus one term per sub-instruction, gradients summed.

    sub_prompts: (text, point subset) pairs, at most 5. Provider failures
    raise StepError so the optimizer can skip the step without corrupting
    its moments; gradient-space or shape violations raise ProtocolError.
    """
    if len(sub_prompts) > 5:
        raise ValidationError(f"{len(sub_prompts)} sub-instructions, limit is 5")
    count = 1 + len(sub_prompts)
    if weights is None:
        weights = [1.0] * count
    if len(weights) != count:
        raise ValidationError(f"{len(weights)} weights for {count} terms")

    pixel = provider.gradient_space == "pixel"
    H, W = hw
    if sigma is None:
        sigma = raster.default_sigma(H, W)
    dz_np = dz.data
    requests: list[tuple[GuidanceRequest, Tensor | None]] = []
    if pixel:
        full_frames = raster.rasterize_stack(sketch, dz, H, W, sigma)
        requests.append((GuidanceRequest(prompt, "full", None, seed, step,
                                         dz_np, None, full_frames.data), full_frames))
        for i, (text, subset) in enumerate(sub_prompts):
            sub_frames = raster.crop_subvideo(sketch, dz, subset, H, W, sigma,
                                              margin=margin)
            requests.append((GuidanceRequest(text, "sub", i, seed, step, dz_np,
                                             subset, sub_frames.data), sub_frames))
    else:
        requests.append((GuidanceRequest(prompt, "full", None, seed, step,
                                         dz_np, None, None), None))
        for i, (text, subset) in enumerate(sub_prompts):
            requests.append((GuidanceRequest(text, "sub", i, seed, step, dz_np,
                                             subset, None), None))

    carrier = None
    total = 0.0
    reports = []
    for (request, node), weight in zip(requests, weights):
        try:
            result = provider.evaluate(request)
        except (StepError, ProtocolError):
            raise
        except Exception as e:
            raise StepError(f"provider failed on request {request.name}: {e}") from e
        if pixel:
            _check_result(result, request, "pixel", node.shape)
            grad = result.gradient
            term = ad.sum_(ad.mul(node, Tensor(weight * grad)))
        else:
            _check_result(result, request, "trajectory", dz.shape)
            grad = result.gradient
            if request.subset is not None:
                # a sub-term may only move its own points
                mask = np.zeros(dz.shape[0], dtype=bool)
                mask[request.subset] = True
                grad = grad * mask[:, None, None]
            term = ad.sum_(ad.mul(dz, Tensor(weight * grad)))
        carrier = term if carrier is None else ad.add(carrier, term)
        total += weight * result.loss
        reports.append(TermReport(request.name, request.prompt,
                                  float(result.loss), float(weight),
                                  float(np.abs(grad).max(initial=0.0))))
    return CompositionalResult(carrier, total, tuple(reports))
