import pytest
from hypothesis import HealthCheck, settings

from phoenixsim import SchemeKind, SimConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

RECOVERABLE = (SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS, SchemeKind.ANUBIS)


def tiny(kind=SchemeKind.PHOENIXPLUS, **kw) -> SimConfig:
    """64 KiB memory, 32-line 4-way cache: evictions on almost every miss."""
    base = dict(memory_bytes=64 * 1024, cache_bytes=2048, associativity=4)
    base.update(kw)
    return SimConfig(**base).with_scheme(kind)


@pytest.fixture
def tiny_config():
    return tiny
