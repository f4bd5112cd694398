"""Trace-driven simulator of a secure NVM controller with recoverable metadata caches."""

from .config import Latencies, SchemeConfig, SchemeKind, SimConfig, build_config
from .errors import (ConfigError, CounterOverflow, DataIntegrityError, IntegrityError, MacMismatch,
                     RecoveryNotSupported, SimulationError, UnrecoverableCounter)
from .mem_model import LineAddr, NvmImage, Region, WriteKind
from .recovery import Outcome, RecoveryReport, osiris_try, recover, recovery_time
from .schemes import SecureMemory, format_image

__all__ = [
    "ConfigError", "CounterOverflow", "DataIntegrityError", "IntegrityError", "Latencies",
    "LineAddr", "MacMismatch", "NvmImage", "Outcome", "RecoveryNotSupported",
    "RecoveryReport", "Region", "SchemeConfig", "SchemeKind", "SecureMemory", "SimConfig",
    "SimulationError", "UnrecoverableCounter", "WriteKind", "build_config", "format_image",
    "osiris_try", "recover", "recovery_time",
]

__version__ = "0.1.0"
