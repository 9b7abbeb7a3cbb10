"""Exception types shared across the package."""


class HabitReachError(Exception):
    """Base class for all package errors."""


class DynamicsError(HabitReachError):
    """Raised when the arm dynamics leave their physical domain.

    ``time_index`` is filled in by :func:`habitreach.arm.simulate` with the
    integration step at which the failure happened.
    """

    def __init__(self, message, time_index=None):
        super().__init__(message)
        self.time_index = time_index

    def __str__(self):
        msg = super().__str__()
        if self.time_index is not None:
            msg = f"{msg} (step {self.time_index})"
        return msg


class SchemaError(HabitReachError):
    """A JSON document does not match the expected layout."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class HashMismatchError(HabitReachError):
    """A template library was generated with a different arm model."""


class GridMismatchError(HabitReachError):
    """Excitation profiles do not share a time grid."""


class EmptyLibraryError(HabitReachError):
    pass


class DegenerateGeometryError(HabitReachError):
    """Angle between error and template direction is undefined."""


class DimensionError(HabitReachError):
    pass


class RankDeficiencyError(HabitReachError):
    pass


class ConfigError(HabitReachError):
    pass
