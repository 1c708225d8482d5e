class GCalcError(Exception):
    code = 1
    description = "N/A"

class ConfigError(GCalcError):
    code = 2
    description = "Configuration error"

class DimensionMismatch(ConfigError):
    description = "Dimension mismatch"

class UnsupportedConfiguration(ConfigError):
    description = "Unsupported configuration"

class CflViolation(ConfigError):
    description = "CFL condition violated"

class ControlViolation(ConfigError):
    description = "Control outside the admissible set"

class InsufficientPoints(ConfigError):
    description = "Insufficient points for regression"

class NumericalFailure(GCalcError):
    code = 3
    description = "Numerical failure"

class DivergenceError(NumericalFailure):
    description = "Non-finite state"

class InvariantViolation(GCalcError):
    code = 1
    description = "Invariant check failed"
