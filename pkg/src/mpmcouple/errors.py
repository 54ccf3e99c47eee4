class ConfigError(ValueError):
    """Invalid scene or configuration; raised before any simulation runs."""

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class SimulationFault(RuntimeError):
    """Unrecoverable numerical fault during a step."""


class GradientAuditError(RuntimeError):
    pass
