class TrajMaskException(Exception):
    pass


class NotFoundException(TrajMaskException):
    pass


class ShapeError(TrajMaskException):
    pass


class NonFiniteError(TrajMaskException):
    pass


class TapeError(TrajMaskException):
    pass


class MaskError(TrajMaskException):
    pass


class DatasetError(TrajMaskException):
    pass


class DatasetFormatError(TrajMaskException):
    pass


class DegenerateReferenceError(TrajMaskException):
    pass


class UnknownKindError(TrajMaskException):
    pass


class ConfigError(TrajMaskException):
    """Configuration problem; ``key_path`` names the offending entry (e.g. ``train.batch_size``)."""

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path
