"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line front end:
2 for configuration problems, 3 for data problems, 4 for numeric failures.
"""


class ProbcastError(Exception):
    exit_code = 1


class ConfigError(ProbcastError, ValueError):
    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(ProbcastError):
    exit_code = 3


class NumericError(ProbcastError, ArithmeticError):
    exit_code = 4


# -- archive -----------------------------------------------------------------


class MalformedRecord(DataError, ValueError):
    def __init__(self, line, reason=""):
        self.line = line
        self.reason = reason
        super().__init__(f"malformed record at line {line}: {reason}")


class ShapeMismatch(DataError, ValueError):
    def __init__(self, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f"expected {expected}, found {found}")


class UnitOutOfRange(DataError, ValueError):
    def __init__(self, variable, value):
        self.variable = variable
        self.value = value
        super().__init__(f"{variable} value {value!r} outside its physical range")


class DegenerateVariable(DataError, ValueError):
    def __init__(self, variable, station):
        self.variable = variable
        self.station = station
        super().__init__(f"zero standard deviation for {variable} at station {station}")


class OverlappingRanges(DataError, ValueError):
    pass


class RangeOutOfBounds(DataError, IndexError):
    pass


# -- analog search -----------------------------------------------------------


class AllVariancesZero(NumericError):
    pass


class NotEnoughCandidates(DataError, ValueError):
    def __init__(self, found, needed):
        self.found = found
        self.needed = needed
        super().__init__(f"{found} usable analog candidates, {needed} needed")


# -- network -----------------------------------------------------------------


class DimensionMismatch(ProbcastError, ValueError):
    pass


class StaleCache(ProbcastError, RuntimeError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, epoch, batch, detail=""):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} {detail}".rstrip())


class EpochOutOfRange(ProbcastError, IndexError):
    pass


# -- model files -------------------------------------------------------------


class VersionMismatch(DataError):
    pass


class CorruptFile(DataError):
    def __init__(self, offset, reason=""):
        self.offset = offset
        super().__init__(f"corrupt model file at byte {offset}: {reason}".rstrip(": "))


class ModelNotFound(DataError, FileNotFoundError):
    pass


# -- verification ------------------------------------------------------------


class MixedEnsembleSizes(DataError, ValueError):
    pass


class EmptyLead(DataError, ValueError):
    pass


class EmptyInput(DataError, ValueError):
    pass
