"""Exception types shared across the package."""


class PPAPError(Exception):
    pass


class ConfigError(PPAPError, ValueError):
    """Invalid configuration. ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        self.message = message
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericError(PPAPError, ArithmeticError):
    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(f"{message} (layer {layer!r})" if layer else message)


class StateError(PPAPError, RuntimeError):
    pass


class ContractError(PPAPError, RuntimeError):
    pass


class FormatError(PPAPError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})" if offset is not None else message)
