"""Exception kinds shared by every module; the CLI maps them to exit codes."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InputError(ValueError):
    """Malformed or out-of-range data fed to an operation or loader."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. reusing a consumed graph)."""
