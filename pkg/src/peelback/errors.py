"""Shared exception taxonomy.

Every failure the protocol can signal maps to one of these. Callers that need
to distinguish causes catch the narrow class; audits and the CLI catch
ProtocolError.
"""

from __future__ import annotations


class ProtocolError(Exception):
    """Base class for all protocol-level failures."""


class ParameterError(ProtocolError):
    """Arguments violate a documented precondition (bad threshold, empty path)."""


class FormatError(ProtocolError):
    """Bytes do not parse as the declared structure."""


class IntegrityError(ProtocolError):
    """Data parsed but fails a cryptographic integrity check."""


class TamperError(IntegrityError):
    """Authenticated decryption failed; ciphertext or key is wrong."""


class InsufficientSharesError(ParameterError):
    """Fewer decryption shares supplied than the threshold requires."""


class IncompleteError(ProtocolError):
    """A multi-part structure is missing pieces (dropped fragment, short read)."""


class PreconditionError(ProtocolError):
    """Operation invoked against state that does not admit it."""
