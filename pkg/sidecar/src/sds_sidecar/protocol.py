"""Wire protocol v1: request validation and the frame codec.

Frames travel as base64 little-endian float32, frame-major then
row-major, with an explicit [f, h, w] shape header. Ink intensities must
lie in [0, 1]. Validation failures raise ProtocolViolation, which the
HTTP layer maps to a 400.
"""

import base64

import numpy as np

PROTOCOL_VERSION = 1
DEFAULT_PARAMS = {"t_min": 0.02, "t_max": 0.98, "cfg_scale": 100}


class ProtocolViolation(ValueError):
    """The request body does not conform to wire protocol v1."""


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(data: str, shape: tuple) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as e:
        raise ProtocolViolation(f"frames are not valid base64: {e}") from e
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise ProtocolViolation(
            f"payload is {len(raw)} bytes, expected {expect} for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _require(body: dict, key: str, kind):
    if key not in body:
        raise ProtocolViolation(f"request is missing {key!r}")
    value = body[key]
    if not isinstance(value, kind):
        raise ProtocolViolation(
            f"{key!r} must be {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}")
    return value


def parse_request(body) -> dict:
    """Validate a /v1/sds body; returns the parsed fields with frames decoded."""
    if not isinstance(body, dict):
        raise ProtocolViolation("request body must be a JSON object")
    version = _require(body, "protocol", int)
    if version != PROTOCOL_VERSION:
        raise ProtocolViolation(
            f"request speaks protocol {version}, server implements {PROTOCOL_VERSION}")
    prompt = _require(body, "prompt", str)
    if not prompt:
        raise ProtocolViolation("prompt must be non-empty")
    shape = _require(body, "shape", list)
    if len(shape) != 3 or not all(isinstance(v, int) and v > 0 for v in shape):
        raise ProtocolViolation(f"shape must be three positive ints, got {shape}")
    frames = decode_array(_require(body, "frames", str), tuple(shape))
    if not np.isfinite(frames).all():
        raise ProtocolViolation("frames contain non-finite values")
    if frames.min() < -1e-6 or frames.max() > 1.0 + 1e-6:
        raise ProtocolViolation(
            f"ink values must lie in [0, 1], got [{frames.min():.4g}, {frames.max():.4g}]")
    seed = _require(body, "seed", int)
    step = _require(body, "step", int)
    params = dict(DEFAULT_PARAMS)
    params.update(_require(body, "params", dict))
    t_min, t_max = params["t_min"], params["t_max"]
    if not (0.0 <= t_min < t_max <= 1.0):
        raise ProtocolViolation(
            f"need 0 <= t_min < t_max <= 1, got t_min={t_min}, t_max={t_max}")
    return {"prompt": prompt, "shape": tuple(shape), "frames": frames,
            "seed": seed, "step": step, "params": params}
