"""Exception hierarchy.

Each error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class TrustPomdpError(Exception):
    exit_code = 1


class ConfigError(TrustPomdpError, ValueError):
    """Malformed configuration, parameter file or policy spec."""

    exit_code = 2


class InvalidParamsError(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid parameters: " + "; ".join(self.violations))


class DataError(TrustPomdpError, ValueError):
    exit_code = 3


class DegenerateDatasetError(DataError):
    def __init__(self, missing_contexts, message=None):
        self.missing_contexts = list(missing_contexts)
        super().__init__(
            message or "contexts never observed: " + ", ".join(self.missing_contexts)
        )


class NoDataError(DataError):
    def __init__(self, complexity):
        self.complexity = complexity
        super().__init__(f"no autonomous trials in {complexity} complexity")


class InconsistentRecordError(DataError):
    """A trial violates the action/experience/reward consistency rules."""


class MissingOutcomeError(InconsistentRecordError):
    pass


class NonConvergenceError(TrustPomdpError, RuntimeError):
    exit_code = 4


class ZeroLikelihoodError(TrustPomdpError, ArithmeticError):
    exit_code = 5

    def __init__(self, trial, episode=None):
        self.trial = trial
        self.episode = episode
        where = f"trial {trial}" if episode is None else f"episode {episode}, trial {trial}"
        super().__init__(f"observation has zero probability under both trust states ({where})")


class NumericalError(TrustPomdpError, ArithmeticError):
    exit_code = 6


class SingularHessianError(NumericalError):
    def __init__(self, report=None):
        self.report = report
        super().__init__("negative Hessian of the log-likelihood is not positive definite")


class DegenerateFitError(NumericalError, ValueError):
    pass


class OutOfRangeError(NumericalError, ValueError):
    pass
