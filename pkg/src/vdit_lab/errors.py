"""Exception hierarchy shared by every lab module."""


class LabError(Exception):
    pass


class ShapeError(LabError, ValueError):
    pass


class NumericError(LabError, ArithmeticError):
    pass


class ContractError(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    pass


class NotApplicableError(LabError, ValueError):
    pass


class BoundsError(LabError, IndexError):
    pass


class ResourceError(LabError, MemoryError):
    pass


class IncompatibilityError(LabError, ValueError):
    def __init__(self, field: str, expected, got):
        super().__init__(f"incompatible {field}: expected {expected!r}, got {got!r}")
        self.field = field
        self.expected = expected
        self.got = got


class DegenerateRowError(LabError, ArithmeticError):
    def __init__(self, row: int, head: int):
        super().__init__(f"mask removed every entry of row {row} (head {head})")
        self.row = row
        self.head = head


class TrainingDivergedError(LabError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss
