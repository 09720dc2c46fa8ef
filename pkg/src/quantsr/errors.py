"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


class InvalidState(RuntimeError):
    """An operation was invoked in a state that does not permit it."""


class InvalidGraph(InvalidArgument):
    """A deploy graph is structurally incomplete (e.g. missing quant params)."""


class ParseError(InvalidArgument):
    """A binary artifact could not be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
