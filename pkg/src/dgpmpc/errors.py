class InvalidArgumentError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class NumericalFailureError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass
