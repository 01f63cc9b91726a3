"""Exception types shared across the package."""


class LocalityMpcError(Exception):
    """Base class for all errors raised by this package."""


class LocalityInfeasible(LocalityMpcError):
    """The locality mask admits no feasible closed-loop response for a column.

    Raised during column precomputation when the dynamics constraints
    restricted to a column's support are inconsistent.
    """

    def __init__(self, column, residual):
        self.column = int(column)
        self.residual = float(residual)
        super().__init__(
            f"locality mask infeasible for column {column} "
            f"(constraint residual {residual:.3e})"
        )


class RowInfeasible(LocalityMpcError):
    """A row's box constraint cannot be met for the measured state.

    Happens when the restricted state vector is exactly zero and the
    admissible interval excludes zero.
    """

    def __init__(self, row):
        self.row = int(row)
        super().__init__(
            f"row {row}: measured state is zero on the support but the "
            f"bounds exclude zero"
        )


class NotConverged(LocalityMpcError):
    """ADMM hit the iteration cap before meeting both tolerances."""

    def __init__(self, residual_history, step=None):
        self.residual_history = list(residual_history)
        self.step = step
        pri, dual = residual_history[-1] if residual_history else (float("nan"),) * 2
        where = f" at MPC step {step}" if step is not None else ""
        super().__init__(
            f"ADMM did not converge{where}: {len(self.residual_history)} iterations, "
            f"last residuals pri={pri:.3e} dual={dual:.3e}"
        )


class OracleFailure(LocalityMpcError):
    """The dense KKT reference solve produced an unreliable solution."""


class ConfigError(LocalityMpcError):
    """A sweep configuration file could not be parsed."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        super().__init__(message)
