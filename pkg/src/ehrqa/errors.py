"""Exception types shared across the package."""

from __future__ import annotations


class EhrqaError(Exception):
    """Base class for all package-specific errors."""


class SchemaViolation(EhrqaError):
    """A corpus record broke a structural rule; the whole load aborts."""

    def __init__(self, case_id, field, reason):
        self.case_id = case_id
        self.field = field
        self.reason = reason
        super().__init__(f"case {case_id!r}, field {field!r}: {reason}")


class DuplicateCaseId(EhrqaError):
    pass


class EmptyAnswer(EhrqaError):
    pass


class DuplicateTemplateId(EhrqaError):
    pass


class UnknownTemplateId(EhrqaError):
    pass


class MissingClinicianQuestion(EhrqaError):
    pass


class MissingAnswer(EhrqaError):
    pass


class UnresolvedPlaceholder(EhrqaError):
    pass


class InvalidTemplate(EhrqaError):
    pass


class BackendError(EhrqaError):
    """Base for completion-backend failures."""


class AuthError(BackendError):
    """Credential rejected; retrying cannot help."""


class RateLimitedExhausted(BackendError):
    """Still rate limited after the configured number of retries."""


class TransportError(BackendError):
    """Network or server failure that survived all retries."""


class MockMissFixture(BackendError):
    """Strict mock backend was asked for a request it has no fixture for."""


class InvalidRunConfig(EhrqaError):
    pass


class InvalidThreshold(EhrqaError):
    pass


class KeyMismatch(EhrqaError):
    pass


class MissingGold(EhrqaError):
    pass


class InvalidSearchSpec(EhrqaError):
    pass


class EmptySubset(EhrqaError):
    pass


class EmptyText(EhrqaError):
    pass


class IncompleteResults(EhrqaError):
    pass


class ConfigError(EhrqaError):
    """Bad run configuration or unusable input file; maps to exit code 2."""
