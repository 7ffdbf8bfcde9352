"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ContractError):
    """An experiment configuration failed validation."""


class DataError(ValueError):
    """A dataset file is malformed or its contents are out of range."""


class NumericalError(ArithmeticError):
    """A non-finite loss, gradient or model output was encountered."""
