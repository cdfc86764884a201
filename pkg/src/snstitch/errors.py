"""Exception hierarchy shared by every module."""


class SNStitchError(Exception):
    pass


class ShapeError(SNStitchError, ValueError):
    pass


class NumericalError(SNStitchError, ArithmeticError):
    pass


class StateError(SNStitchError, RuntimeError):
    pass


class UnsupportedArchitectureError(SNStitchError, ValueError):
    pass


class FormatError(SNStitchError, ValueError):
    """Malformed on-disk data. ``offset`` is the byte position where parsing stopped."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(NumericalError):
    def __init__(self, iteration, config_id=None, last_good=None):
        self.iteration = iteration
        self.config_id = config_id
        self.last_good = last_good
        msg = f"non-finite loss at iteration {iteration}"
        if config_id is not None:
            msg += f" (stitch config {config_id})"
        if last_good is not None:
            msg += f"; last good iteration {last_good}"
        super().__init__(msg)
