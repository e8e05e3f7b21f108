"""Score-distillation sidecar: wire protocol v1 over HTTP.

The service accepts rendered ink frames plus a text prompt and returns a
scalar loss with a pixel-space gradient of the same shape. It holds a
single model instance; a mock backend ships alongside the real seam so
protocol and determinism tests never need GPU or weights.
"""

from .app import create_app
from .model import DiffusionModel, MockModel, SdsJob, SdsScore
from .protocol import PROTOCOL_VERSION

__version__ = "0.1.0"

__all__ = [
    "DiffusionModel",
    "MockModel",
    "PROTOCOL_VERSION",
    "SdsJob",
    "SdsScore",
    "create_app",
    "__version__",
]
