"""Exception types shared across the package."""


class FormatError(ValueError):
    """Raised when a vector file or model container is malformed."""


class InvariantError(RuntimeError):
    """Raised when an internal structural invariant is violated.

    Signals a corrupted model or index (for example a codebook whose
    centroid ordering no longer matches its derived group ids), as
    opposed to bad user input.
    """
