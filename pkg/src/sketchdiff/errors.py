"""Exception types shared across the package.

The CLI maps these onto process exit codes: DataError -> 3,
ModelError (and subclasses) -> 4, DivergenceError -> 5.
"""


class NonFiniteError(ValueError):
    """A tensor contains NaN or Inf where finite values are required."""


class DataError(Exception):
    """Dataset files, manifests or image payloads are missing or malformed."""


class ModelError(Exception):
    """Checkpoints, bundles or model wiring are unusable."""


class DigestMismatchError(ModelError):
    """A content digest does not match the parameters it claims to describe."""


class FrozenBundleError(ModelError):
    """An operation required a frozen backbone, or tried to mutate one."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss and was aborted."""
