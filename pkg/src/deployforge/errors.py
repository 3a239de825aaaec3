"""Exception taxonomy shared across the pipeline.

Transient client errors derive from RetryableClientError and are retried a
bounded number of times; everything else is terminal for the operation that
raised it. InfrastructureError marks substrate problems (engine down, store
unwritable) that must never be confused with a tool's own build failure.
"""

from __future__ import annotations


class DeployForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(DeployForgeError):
    """Invalid, unparseable, or unknown configuration."""


class RetryableClientError(DeployForgeError):
    """Transient client-side failure; safe to retry with backoff."""

    def __init__(self, message: str, wait_hint_s: float | None = None):
        super().__init__(message)
        self.wait_hint_s = wait_hint_s


class RateLimitError(RetryableClientError):
    """Host asked us to slow down; carries an optional wait hint."""


class NetworkError(RetryableClientError):
    """Connectivity-level failure talking to an external service."""


class ProviderError(RetryableClientError):
    """Text-generation or embedding provider failed transiently."""


class FatalClientError(DeployForgeError):
    """Client-side failure that retrying cannot fix."""


class AuthError(FatalClientError):
    """Credentials rejected by an external service."""


class BudgetExceededError(FatalClientError):
    """Call budget for one attempt is exhausted."""


class InvalidCursorError(FatalClientError):
    """Pagination cursor was not issued by this client for this query."""


class ProposalError(DeployForgeError):
    """No usable build recipe could be derived from the evidence."""


class SpecValidationError(DeployForgeError):
    """A build recipe violates a structural invariant."""


class RecipeParseError(DeployForgeError):
    """Recipe text could not be parsed into a build recipe."""


class InfrastructureError(DeployForgeError):
    """The execution substrate itself failed; distinct from tool failure."""


class ResourceLimitError(DeployForgeError):
    """A configured resource cap (repo size, queue depth) was exceeded."""


class QueueCapacityError(ResourceLimitError):
    """Scheduler queue is full; caller may retry submission later."""


class ContractViolation(DeployForgeError):
    """Caller broke a scheduler protocol rule (double complete, etc.)."""


class RegistryConflictError(DeployForgeError):
    """Re-registration with divergent content for an existing tool id."""


class UnknownToolError(DeployForgeError):
    """Lookup of a tool id that is not in the registry."""


class EmptySummaryError(DeployForgeError):
    """Aggregation requested over an empty record collection."""
