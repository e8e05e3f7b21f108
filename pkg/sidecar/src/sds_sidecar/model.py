"""Model backends behind the /v1/sds endpoint.

Both backends draw their diffusion timestep from a counter-based stream
keyed by (seed + step), so a fixed request body always yields the same
draw. MockModel predicts a zero noise residual, which makes the
distilled gradient identically zero and the surrogate loss 0; it needs
no weights and is the only backend exercised by cross-component CI.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SdsJob:
    prompt: str
    frames: np.ndarray          # (f, h, w) ink intensities in [0, 1]
    seed: int
    step: int
    params: dict                # t_min, t_max, cfg_scale


@dataclass(frozen=True)
class SdsScore:
    loss: float
    gradient: np.ndarray        # same shape as the job's frames
    timestep: int               # the sampled diffusion timestep (0..1000)


def sample_timestep(job: SdsJob) -> int:
    r = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(job.seed + job.step)))
    t_min, t_max = job.params["t_min"], job.params["t_max"]
    return int(round((t_min + (t_max - t_min) * r.random()) * 1000))


class ModelNotReady(RuntimeError):
    """No weights are loaded; the HTTP layer maps this to a 503."""


class MockModel:
    """Deterministic stand-in that predicts a zero noise residual."""

    ready = True

    def __init__(self, model_id: str = "mock-sds-v1"):
        self.model_id = model_id

    def evaluate(self, job: SdsJob) -> SdsScore:
        # zero residual: the gradient vanishes no matter the noised input
        return SdsScore(0.0, np.zeros_like(job.frames), sample_timestep(job))


class DiffusionModel:
    """Seam for a real text-to-video backend.

    A concrete implementation would resize the ink frames to the model's
    native resolution (differentiably, so the gradient maps back to the
    request's pixels), noise them at the sampled timestep, and return the
    classifier-free-guided residual. No weights ship with this package,
    so the instance reports not-ready and every job is refused with 503.
    """

    ready = False

    def __init__(self, model_id: str = "unloaded"):
        self.model_id = model_id

    def evaluate(self, job: SdsJob) -> SdsScore:
        raise ModelNotReady(
            f"model {self.model_id!r} has no weights loaded; use --mock")
