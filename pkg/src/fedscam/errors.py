"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or violates a constraint."""


class IdxParseError(ValueError):
    """Base class for IDX decoding failures. Carries the byte offset of the fault."""

    def __init__(self, message: str, path, offset: int):
        super().__init__(f"{path}: {message} (at byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class IdxMagicError(IdxParseError):
    pass


class IdxTruncatedError(IdxParseError):
    pass


class IdxCountMismatchError(IdxParseError):
    pass
