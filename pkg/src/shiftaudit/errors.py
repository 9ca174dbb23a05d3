"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AuditError(Exception):
    exit_code = 1


class SchemaError(AuditError, ValueError):
    """Input files or configs that do not match the expected layout."""

    exit_code = 2


class ProtocolViolation(AuditError):
    """Target-domain data routed into training, backgrounds or CIS targets."""

    exit_code = 3


class TrainingDiverged(AuditError, FloatingPointError):
    exit_code = 4
