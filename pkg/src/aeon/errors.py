"""Error taxonomy shared by every engine component."""


class AeonError(Exception):
    """Base class for all engine errors."""


class InvalidArgumentError(AeonError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class StorageError(AeonError, OSError):
    """An I/O or file-format failure underneath the engine."""


class DurabilityError(StorageError):
    """A sync barrier or log write failed; in-memory state was not mutated."""


class NotFoundError(AeonError, KeyError):
    """The requested id does not exist (or the index is empty)."""


class GoneError(AeonError):
    """A reference points at a retired generation; re-fetch and retry."""
