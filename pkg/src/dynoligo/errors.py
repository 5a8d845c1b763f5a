"""Exception types. Each carries a short machine-readable ``code`` used by the CLI."""


class DynOligoError(Exception):
    code = "ERROR"


class ConfigError(DynOligoError, ValueError):
    code = "INVALID_CONFIG"


class AllFirmsExit(DynOligoError):
    code = "ALL_FIRMS_EXIT"


class PriceOutOfBounds(DynOligoError, ValueError):
    code = "PRICE_OUT_OF_BOUNDS"

    def __init__(self, agent, price, low, high):
        self.agent = agent
        super().__init__(f"agent {agent}: price {price!r} outside [{low!r}, {high!r}]")


class NoConvergence(DynOligoError):
    code = "NO_CONVERGENCE"

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")


class ConstraintViolated(DynOligoError):
    code = "CONSTRAINT_VIOLATED"

    def __init__(self, which, solution=None):
        self.which = which
        self.solution = solution
        super().__init__(f"equilibrium candidate leaves the feasible set: {which}")


class SingularStageSystem(DynOligoError):
    code = "SINGULAR_STAGE_SYSTEM"


class DivergedTraining(DynOligoError):
    code = "DIVERGED_TRAINING"


class OpponentStochastic(DynOligoError):
    code = "OPPONENT_STOCHASTIC"


class LengthMismatch(DynOligoError, ValueError):
    code = "LENGTH_MISMATCH"


class ConfigMismatch(DynOligoError, ValueError):
    code = "CONFIG_MISMATCH"


class EmptyInput(DynOligoError, ValueError):
    code = "EMPTY_INPUT"


class MissingColumns(DynOligoError, ValueError):
    code = "MISSING_COLUMNS"
