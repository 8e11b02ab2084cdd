from enum import Enum


class Split(Enum):
    TRAIN = "train"
    EVAL = "eval"

    @classmethod
    def parse(cls, value: "str | Split") -> "Split":
        if isinstance(value, Split):
            return value
        try:
            return cls(value)
        except ValueError:
            raise InputError(
                f"Invalid split: '{value}' (expected 'train' or 'eval')"
            ) from None


class PruneToolkitError(Exception):
    exit_code = 1


class UsageError(PruneToolkitError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class InputError(PruneToolkitError):
    exit_code = 1


class DimensionError(InputError):
    def __init__(self, message: str, *shapes):
        if shapes:
            message += ": " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class PolicyError(InputError):
    pass


class InvariantError(InputError):
    pass


class DataFormatError(PruneToolkitError):
    exit_code = 2


class CheckpointFormatError(DataFormatError):
    pass


class NonFiniteError(PruneToolkitError):
    exit_code = 3


class TrainingDiverged(PruneToolkitError):
    exit_code = 3
