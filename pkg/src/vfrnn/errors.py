"""Exception hierarchy shared across the package."""


class VfrnnError(Exception):
    """Base class; ``module`` names the subsystem that raised."""

    module = "vfrnn"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class NonConvergence(VfrnnError):
    module = "model"


class SingularPhi(VfrnnError):
    module = "model"


class ModelFormatError(VfrnnError):
    module = "io"

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class UnsupportedActivation(VfrnnError):
    module = "sector"


class DomainViolation(VfrnnError):
    module = "sector"


class NumericalFailure(VfrnnError):
    module = "sdp"


class NeverFeasible(VfrnnError):
    module = "sdp"


class SynthesisFailed(VfrnnError):
    module = "synthesis"

    def __init__(self, message, last_lambda=None):
        self.last_lambda = last_lambda
        super().__init__(message)


class EmptyInterior(VfrnnError):
    module = "invariant_sets"


class Infeasible(VfrnnError):
    module = "nmpc"


class SolverStall(VfrnnError):
    module = "nmpc"
