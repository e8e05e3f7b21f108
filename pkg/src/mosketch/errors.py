"""Exception hierarchy and CLI exit-code mapping.

Exit codes: 0 ok, 2 validation, 3 client failure, 4 numerical failure.
"""


class MosketchError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(MosketchError):
    """Input or configuration violates a documented contract."""

    exit_code = 2


class ShapeError(ValidationError):
    """Array dimensions do not match the expected shape."""


class UsageError(ValidationError):
    """An operation was called with unusable arguments."""


class SvgFormatError(ValidationError):
    """SVG document is structurally invalid for import."""


class UnsupportedSvgFeatureError(SvgFormatError):
    """SVG uses a path command outside the supported M/C subset."""

    def __init__(self, command: str):
        self.command = command
        super().__init__(f"unsupported SVG path command: {command!r} "
                         "(only absolute M and C are supported)")


class PlanValidationError(ValidationError):
    """Motion plan failed schema or consistency validation.

    The message names the offending path; `raw` holds the response.
    """

    def __init__(self, message: str, raw=None):
        self.raw = raw
        super().__init__(message)


class DecompositionError(ValidationError):
    """Scene decomposition is invalid or could not be obtained.

    `raw` carries the planner response that failed to validate.
    """

    def __init__(self, message: str, raw=None):
        self.raw = raw
        super().__init__(message)


class ReplayError(ValidationError):
    """Run directory is missing artifacts needed for replay."""


class ClientError(MosketchError):
    """A remote client (planner, grounder, guidance sidecar) failed."""

    exit_code = 3


class GroundingMissError(ClientError):
    """Grounding returned no box for an object."""

    def __init__(self, obj: str):
        self.object_name = obj
        super().__init__(f"no bounding box detected for object {obj!r}")


class ProtocolError(ClientError):
    """Guidance wire protocol violated (version or payload shape)."""


class StepError(ClientError):
    """A guidance request failed mid-optimization; the step is skipped."""


class NumericalError(MosketchError):
    """A numeric operation produced NaN or Inf."""

    exit_code = 4


class PipelineStageError(MosketchError):
    """Wraps an error with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage {stage!r} failed: {cause}")
