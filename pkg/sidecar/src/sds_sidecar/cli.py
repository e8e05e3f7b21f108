"""Command line entry point: `sds-sidecar [--mock] [--port N] [--model-id ID]`."""

import argparse

import uvicorn

from .app import create_app
from .model import DiffusionModel, MockModel


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sds-sidecar",
        description="Serve score-distillation losses and gradients over HTTP.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--model-id", default=None,
                        help="identifier echoed in every response")
    parser.add_argument("--mock", action="store_true",
                        help="deterministic zero-residual backend; no weights needed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.mock:
        model = MockModel(args.model_id or "mock-sds-v1")
    else:
        model = DiffusionModel(args.model_id or "unloaded")
    uvicorn.run(create_app(model), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
