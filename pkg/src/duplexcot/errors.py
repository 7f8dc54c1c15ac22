"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class FormatError(ValueError):
    """A record on disk does not satisfy its schema."""


class InfeasibleAlignment(ValueError):
    """The target cannot be aligned to the given number of frames."""


class ModelContractError(RuntimeError):
    """A sequence model returned something that is not a log distribution."""


class MissingTimingEvent(KeyError):
    pass
