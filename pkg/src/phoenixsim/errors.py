"""Exception hierarchy. Integrity problems are distinct from usage errors so
callers (and the CLI's exit codes) can tell an attack from a bug."""


class SimulationError(Exception):
    pass


class IntegrityError(SimulationError):
    """Tampering or replay detected."""


class MacMismatch(IntegrityError):
    def __init__(self, addr, level=None):
        self.addr = addr
        self.level = level
        where = f" (level {level})" if level is not None else ""
        super().__init__(f"MAC mismatch at ToC line {addr}{where}")


class DataIntegrityError(IntegrityError):
    def __init__(self, data_index):
        self.data_index = data_index
        super().__init__(f"ECC check failed for data line {data_index}")


class UnrecoverableCounter(IntegrityError):
    def __init__(self, data_index, persisted, window):
        self.data_index = data_index
        super().__init__(
            f"no counter in [{persisted}, {persisted + window - 1}] decrypts data line {data_index}")


class CounterOverflow(SimulationError):
    pass


class ConfigError(SimulationError, ValueError):
    pass


class RecoveryNotSupported(SimulationError):
    """The scheme keeps no persistent record of the metadata cache."""

