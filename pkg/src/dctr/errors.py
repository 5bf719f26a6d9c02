"""Exception hierarchy shared by every module."""

from __future__ import annotations


class DCTRError(Exception):
    """Base class for all engine errors."""


class StructuralError(DCTRError, ValueError):
    """A schema or graph violates a structural invariant (unknown table, bad edge)."""


class DataError(DCTRError, ValueError):
    """Input data references something the corpus does not contain."""


class UsageError(DCTRError, ValueError):
    """A caller broke an operation's precondition."""


class FormatError(DCTRError):
    """A persisted file is corrupt or was produced under an incompatible descriptor."""


class TransientError(DCTRError):
    """A remote provider was unreachable; the call may succeed if retried."""


class ProviderContractError(DCTRError):
    """A provider answered, but the answer breaks its declared contract."""


class ParseError(DCTRError, ValueError):
    """A model response could not be parsed at all."""


class InternalError(DCTRError, RuntimeError):
    """Internal state is inconsistent, e.g. the index was built from another corpus."""
