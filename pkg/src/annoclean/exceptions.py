"""Exception hierarchy shared by every stage of the pipeline."""


class AnnocleanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AnnocleanError, ValueError):
    """Invalid user input: bad paths, bad parameters, malformed configs."""


class StampError(ConfigurationError):
    """A stamp file violates the stamp invariants."""


class CollisionError(AnnocleanError):
    """Refusing to overwrite an existing output (dataset dir, run dir)."""


class ShapeError(AnnocleanError, ValueError):
    pass


class CheckpointError(AnnocleanError):
    pass


class RegistryError(AnnocleanError, KeyError):
    def __str__(self):
        # KeyError wraps its message in quotes otherwise
        return str(self.args[0]) if self.args else ""


class NonFiniteLossError(AnnocleanError, FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
