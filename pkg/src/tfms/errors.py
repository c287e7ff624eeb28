"""Exception hierarchy.

Every message starts with a short snake_case code followed by detail, e.g.
``unknown_campaign: 17``. Callers that only care about the category can
match on the class; logs and CLI output stay greppable by code.
"""

from __future__ import annotations


class TfmsError(RuntimeError):
    """Base class for all errors raised by this package."""


class ContractViolation(TfmsError):
    """A caller broke an operation's precondition."""


class UnknownCampaignError(ContractViolation):
    pass


class SnapshotIntegrityError(TfmsError):
    """Snapshot file is truncated, corrupt or internally inconsistent."""


class WorkloadSpecError(TfmsError):
    pass


class LogFormatError(TfmsError):
    """Malformed record in a line-delimited event or traffic log."""


class ConfigError(TfmsError):
    pass


class ReportMismatchError(TfmsError):
    """Two reports were produced from different workloads."""


class ReportFormatError(TfmsError):
    """A report file is not valid report JSON."""
