"""HTTP layer: FastAPI app wired to a single model backend.

The HTTP server may accept connections concurrently, but evaluations are
serialized through one lock because there is exactly one model instance
(on a real deployment, one GPU). Error mapping: malformed request -> 400,
model not ready or out of memory -> 503 (the latter with Retry-After).
"""

import threading

from fastapi import FastAPI, HTTPException, Request

from .model import ModelNotReady, SdsJob
from .protocol import (
    PROTOCOL_VERSION,
    ProtocolViolation,
    encode_array,
    parse_request,
)


def create_app(model) -> FastAPI:
    app = FastAPI(title="sds-sidecar")
    evaluate_lock = threading.Lock()

    @app.get("/v1/health")
    def health():
        return {
            "status": "ok" if model.ready else "loading",
            "protocol": PROTOCOL_VERSION,
            "model_id": model.model_id,
        }

    @app.post("/v1/sds")
    async def sds(request: Request):
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(400, "request body is not valid JSON")
        try:
            fields = parse_request(body)
        except ProtocolViolation as e:
            raise HTTPException(400, str(e))
        if not model.ready:
            raise HTTPException(503, f"model {model.model_id!r} is not loaded",
                                headers={"Retry-After": "30"})
        job = SdsJob(fields["prompt"], fields["frames"], fields["seed"],
                     fields["step"], fields["params"])
        with evaluate_lock:
            try:
                score = model.evaluate(job)
            except ModelNotReady as e:
                raise HTTPException(503, str(e), headers={"Retry-After": "30"})
            except MemoryError:
                raise HTTPException(503, "out of memory evaluating job",
                                    headers={"Retry-After": "5"})
        params_echo = dict(fields["params"])
        params_echo["timestep"] = score.timestep
        return {
            "loss": score.loss,
            "grad": encode_array(score.gradient),
            "model_id": model.model_id,
            "params_echo": params_echo,
        }

    return app
