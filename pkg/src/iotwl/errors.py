"""Exception and warning types shared across the package."""


class WhitelistError(Exception):
    """Base class for all errors raised by iotwl."""


class MalformedFile(WhitelistError):
    pass


class SchemaMismatch(WhitelistError):
    pass


class InsufficientData(WhitelistError):
    pass


class EmptyValidation(WhitelistError):
    pass


class OneSidedData(WhitelistError):
    pass


class InvalidSpec(WhitelistError):
    pass


class IoFailure(WhitelistError):
    pass


class TruncatedPacket(UserWarning):
    """A capture record was cut short; the packet is skipped and counted."""


class DegenerateFeatures(UserWarning):
    """Every training row is identical, so no tree can split."""


class EmptyDevice(UserWarning):
    """A device contributed no rows to one of the temporal splits."""
