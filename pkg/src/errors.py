class CWAttackError(Exception):
    """Base class for every error raised by this project."""


class RejectedInputError(CWAttackError, ValueError):
    pass


class ContractViolationError(CWAttackError, RuntimeError):
    pass


class TrainingFailureError(CWAttackError, RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became NaN"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


class AttackConfigError(CWAttackError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DegenerateBoundaryError(CWAttackError, ArithmeticError):
    pass


class ZeroGradientError(CWAttackError, ArithmeticError):
    def __init__(self, category: int):
        super().__init__(f"input gradient of category {category} vanished")
        self.category = category


class UndefinedMetricError(CWAttackError, ValueError):
    pass


class ArtifactMissingError(CWAttackError, FileNotFoundError):
    pass
