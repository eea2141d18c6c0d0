"""Exception hierarchy shared by all modules."""


class MechShiftError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MechShiftError):
    """Invalid user input (graph, table, configuration). Maps to CLI exit code 2."""


class CycleDetected(ValidationError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cycle detected: " + " -> ".join(self.cycle + self.cycle[:1]))


class DuplicateNode(ValidationError):
    pass


class DanglingEdge(ValidationError):
    pass


class UnknownNode(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class MissingColumn(ValidationError):
    pass


class TypeMismatch(ValidationError):
    pass


class EmptyTable(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class IncompatibleFamily(ValidationError):
    pass


class InsufficientData(MechShiftError):
    pass


class UnsupportedFamily(MechShiftError):
    pass


class GraphMismatch(ValidationError):
    pass


class NonLinearGaussianModel(MechShiftError):
    pass


class NonPositiveVariance(ValidationError):
    pass


class AbsoluteContinuityViolation(MechShiftError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooFewPoints(MechShiftError):
    pass


class ZeroDistance(MechShiftError):
    pass


class IncompatibleMechanisms(MechShiftError):
    pass


class TooManyPlayers(MechShiftError):
    pass


class BandwidthDegenerate(MechShiftError):
    pass


class EmptySample(ValidationError):
    pass
