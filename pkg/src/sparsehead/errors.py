"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class UnsupportedConfig(ContractViolation):
    """A kernel geometry or layer configuration outside the supported set."""


class ModeViolation(RuntimeError):
    """A training-only operation was invoked at inference (or vice versa)."""


class SceneInfeasible(RuntimeError):
    """Rejection sampling could not realize the requested scene statistics."""


class ConfigError(ValueError):
    """A run configuration file or override could not be parsed."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss was encountered; diagnostics were dumped."""
