"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input violates an operation's preconditions."""


class LoadError(DomainError):
    """A file or record could not be parsed into a valid object."""
