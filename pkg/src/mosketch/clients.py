"""Pluggable planner and grounding clients.

Three implementations each: a live HTTP client, a recorded-fixture replayer
for offline runs and tests, and an error stub. The orchestration layers
(scene decomposition, motion planning) only see the request/response
dictionaries, so recorded transcripts replay byte-for-byte.

Planner request: {image: base64 PNG, instruction: str, template_id: str}.
Grounding request: {image: base64 PNG, labels: [str]}.
"""

from __future__ import annotations

import base64
import json
import os
import time
from pathlib import Path
from typing import Protocol

from .errors import ClientError

PLANNER_API_KEY_ENV = "MOSKETCH_PLANNER_API_KEY"

TEMPLATE_SCENE_DECOMPOSITION = "scene_decomposition"
TEMPLATE_MOTION_PLAN = "motion_plan"

# Free-text prompt templates rendered client-side; every template ends with
# a strict respond-in-JSON clause so responses stay machine-parseable.
PROMPT_TEMPLATES = {
    TEMPLATE_SCENE_DECOMPOSITION: (
        "You are shown a line sketch drawn on a {canvas_w} * {canvas_h} canvas, "
        "plus an animation instruction.\n"
        "Instruction: {instruction}\n"
        "Name the distinct objects that matter for this animation (7 at most), "
        "treating each as separate from the others. Then split the instruction "
        "into at most 5 simple instructions, each covering one object or one "
        "clear interaction, and name the objects each one involves.\n"
        "Respond with JSON only, no prose outside it, in the form: "
        '{{"objects": ["name"], "instructions": '
        '[{{"text": "...", "objects": ["name"]}}]}}'
    ),
    TEMPLATE_MOTION_PLAN: (
        "You are shown a line sketch drawn on a {canvas_w} * {canvas_h} canvas. "
        "Each object below starts at the bounding box given as "
        "[x, y, w, h] with (x, y) the top-left corner.\n"
        "Objects: {objects_with_boxes}\n"
        "Instruction: {instruction}\n"
        "Plan each object's bounding box for {frames} frames so the boxes act "
        "out the instruction. Write out how you expect each object to move "
        "before you commit to numbers; keep motion smooth between neighboring "
        "frames and keep boxes on the canvas when you can.\n"
        "Respond with JSON only, in the form: "
        '{{"reasoning": "...", "plan": '
        '[{{"object": "name", "boxes": [[x, y, w, h]]}}]}} '
        "with exactly {frames} boxes per object."
    ),
}


def encode_image(png_bytes: bytes) -> str:
    return base64.b64encode(png_bytes).decode("ascii")


class PlannerClient(Protocol):
    def complete(self, request: dict) -> dict:
        """Request {image, instruction, template_id} -> parsed JSON response."""


class GroundingClient(Protocol):
    def detect(self, request: dict) -> dict:
        """Request {image, labels} -> {boxes: [{label, x, y, w, h, score}]}."""


def _post_json(url: str, payload: dict, headers: dict, attempts: int = 3,
               timeout: float = 60.0) -> dict:
    import requests

    last = None
    for attempt in range(attempts):
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
            if resp.status_code >= 500:
                raise ClientError(f"{url} returned {resp.status_code}")
            if resp.status_code >= 400:
                raise ClientError(f"{url} rejected request: {resp.status_code} {resp.text[:200]}")
            return resp.json()
        except ClientError as e:
            last = e
            if "rejected request" in str(e):
                raise
        except Exception as e:  # connection errors, bad JSON
            last = ClientError(f"request to {url} failed: {e}")
        if attempt < attempts - 1:
            time.sleep(0.5 * 2 ** attempt)
    raise last


class HttpPlannerClient:
    def __init__(self, base_url: str, api_key: str | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(PLANNER_API_KEY_ENV)

    def complete(self, request: dict) -> dict:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return _post_json(f"{self.base_url}/complete", request, headers)


class HttpGroundingClient:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def detect(self, request: dict) -> dict:
        return _post_json(f"{self.base_url}/detect", request, {})


class FixturePlannerClient:
    """Replays recorded responses from {dir}/{template_id}.json."""

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)

    def complete(self, request: dict) -> dict:
        path = self.fixture_dir / f"{request['template_id']}.json"
        if not path.exists():
            raise ClientError(f"no recorded planner response: {path}")
        return json.loads(path.read_text())


class FixtureGroundingClient:
    """Replays a recorded detector response from {dir}/grounding.json."""

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)

    def detect(self, request: dict) -> dict:
        path = self.fixture_dir / "grounding.json"
        if not path.exists():
            raise ClientError(f"no recorded grounding response: {path}")
        return json.loads(path.read_text())


class ErrorStubPlannerClient:
    def complete(self, request: dict) -> dict:
        raise ClientError("planner unavailable (error stub)")


class ErrorStubGroundingClient:
    def detect(self, request: dict) -> dict:
        raise ClientError("grounding unavailable (error stub)")
