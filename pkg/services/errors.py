from typing import Iterable, Optional, Tuple


class StressLabError(Exception):
    """Base class for every error raised by the stresslab services."""


class ConfigError(StressLabError, ValueError):
    pass


class UnsupportedOperationError(StressLabError, ValueError):
    pass


class DomainMismatchError(StressLabError, ValueError):
    pass


class DegenerateNormError(StressLabError, ValueError):
    pass


class DegenerateInputError(StressLabError, ValueError):
    pass


class ScenarioMismatchError(StressLabError, ValueError):
    pass


class ResolutionError(StressLabError, ValueError):
    pass


class ContractError(StressLabError, ValueError):
    pass


class InsufficientSeedsError(StressLabError, ValueError):
    pass


class RecordConstructionError(StressLabError, ValueError):
    pass


class CompletenessError(StressLabError, ValueError):
    def __init__(self, missing: Iterable[Tuple[str, str]]):
        self.missing = sorted(missing)
        pairs = ", ".join(f"({p}, {s})" for p, s in self.missing)
        super().__init__(f"Missing summary cells: {pairs}")


class NothingToReportError(StressLabError, RuntimeError):
    pass


class NumericError(StressLabError, RuntimeError):
    pass


class BlowUpError(NumericError):
    def __init__(self, step: int, max_abs: Optional[float] = None, solver: str = ""):
        self.step = step
        self.max_abs = max_abs
        self.solver = solver
        detail = f" (max |value| {max_abs:.3e})" if max_abs is not None and max_abs == max_abs else ""
        super().__init__(f"{solver or 'solver'} blew up at step {step}{detail}")


class StabilityError(NumericError):
    def __init__(self, step: int, cfl: float):
        self.step = step
        self.cfl = cfl
        super().__init__(f"CFL number {cfl:.3f} >= 1 at step {step}")


class SolverFailureError(NumericError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (relative residual {residual:.3e})")


class TrainingFailureError(StressLabError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch} (loss {loss})")
