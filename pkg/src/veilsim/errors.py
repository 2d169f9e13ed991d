"""Exception taxonomy shared across the pipeline."""


class VeilsimError(Exception):
    """Base class for all errors raised by this package."""

    kind = "internal"

    def payload(self) -> dict:
        return {"type": self.kind, "message": str(self)}


class ValidationError(VeilsimError):
    """An input value violates a documented contract (shape, range, rank)."""

    kind = "validation"


class ConfigurationError(VeilsimError):
    """A config value or combination of config values is unusable."""

    kind = "configuration"


class MissingArtifactError(VeilsimError):
    """A stage was invoked before its upstream artifacts exist."""

    kind = "missing_artifact"

    def __init__(self, message: str, required_command: str):
        super().__init__(message)
        self.required_command = required_command

    def payload(self) -> dict:
        out = super().payload()
        out["required_command"] = self.required_command
        return out
