"""Exception hierarchy.

Errors are grouped by the CLI exit code they map to: data problems (2),
model problems (3) and generation-backend problems (4). Anything else that
escapes is a usage error (1).
"""


class FoodWarnError(Exception):
    exit_code = 1


class ConfigError(FoodWarnError):
    exit_code = 1


# -- data ---------------------------------------------------------------


class DataError(FoodWarnError):
    exit_code = 2


class MissingColumn(DataError):
    pass


class BadDate(DataError):
    pass


class BadNumber(DataError):
    pass


class DuplicateKey(DataError):
    pass


class NoOverlap(DataError):
    pass


class UnknownSeverity(DataError):
    pass


class TooShort(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class UnknownColumn(DataError):
    pass


class NoWindows(DataError):
    pass


class BadShape(DataError):
    pass


class TooFewSamples(DataError):
    pass


class LengthMismatch(DataError):
    pass


class BadSpec(DataError):
    pass


# -- numerics -----------------------------------------------------------


class NumericsError(FoodWarnError):
    exit_code = 3


class ShapeMismatch(NumericsError):
    pass


class BatchTooSmall(NumericsError):
    pass


class BadRate(NumericsError):
    pass


class NonDeterministic(NumericsError):
    pass


# -- models -------------------------------------------------------------


class ModelError(FoodWarnError):
    exit_code = 3


class BadVersion(ModelError):
    pass


class CorruptPayload(ModelError):
    pass


class KindMismatch(ModelError):
    pass


class RecipeMissing(ModelError):
    pass


class RecipeMismatch(ModelError):
    pass


# -- chat ---------------------------------------------------------------


class ChatError(FoodWarnError):
    exit_code = 1


class EmptyText(ChatError):
    pass


class EmptyStore(ChatError):
    pass


class IncompleteProfile(ChatError):
    pass


class BackendUnavailable(FoodWarnError):
    exit_code = 4
