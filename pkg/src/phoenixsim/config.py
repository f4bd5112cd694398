from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional

from .errors import ConfigError


class SchemeKind(str, Enum):
    WRITEBACK = "writeback"
    STRICT = "strict"
    ANUBIS = "anubis"
    PHOENIX = "phoenix"
    PHOENIXPLUS = "phoenixplus"

    @classmethod
    def parse(cls, text: str) -> "SchemeKind":
        key = text.strip().lower().replace("-", "").replace("_", "").replace("+", "plus")
        for k in cls:
            if k.value == key:
                return k
        raise ConfigError(f"unknown scheme {text!r}")

    @property
    def lazy(self) -> bool:
        return self is not SchemeKind.STRICT

    @property
    def uses_cache_mirror(self) -> bool:
        return self in (SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS)


ALL_SCHEMES = tuple(SchemeKind)


@dataclass(frozen=True)
class Latencies:
    read_ns: int = 60
    write_ns: int = 150
    hash_ns: int = 40


@dataclass(frozen=True)
class SchemeConfig:
    kind: SchemeKind = SchemeKind.PHOENIXPLUS
    persistence_limit: int = 4
    ecc_engines: int = 4
    # Osiris trial window; defaults to the persistence limit. Setting it
    # smaller than the limit is only useful for negative tests.
    osiris_window: Optional[int] = None
    cm_write_always: bool = False
    recover_counters_at: str = "recovery"

    @property
    def window(self) -> int:
        return self.osiris_window if self.osiris_window is not None else self.persistence_limit

    def validate(self) -> None:
        if self.persistence_limit < 1:
            raise ConfigError("persistence limit must be >= 1")
        if self.ecc_engines < 1:
            raise ConfigError("need at least one ECC engine")
        if self.window < 1:
            raise ConfigError("Osiris window must be >= 1")
        if self.recover_counters_at not in ("recovery", "fetch"):
            raise ConfigError("recover_counters_at must be 'recovery' or 'fetch'")


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class SimConfig:
    memory_bytes: int = 1 << 20
    cache_bytes: int = 262144
    associativity: int = 8
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    seed: int = 1
    latencies: Latencies = field(default_factory=Latencies)
    wpq_capacity: int = 16

    @property
    def data_lines(self) -> int:
        return self.memory_bytes // 64

    @property
    def cache_lines(self) -> int:
        return self.cache_bytes // 64

    def validate(self) -> "SimConfig":
        if not _is_pow2(self.memory_bytes) or self.memory_bytes < 64 * 64:
            raise ConfigError("memory size must be a power of two of at least 4 KiB")
        if not _is_pow2(self.associativity):
            raise ConfigError("associativity must be a power of two")
        if not _is_pow2(self.cache_bytes) or self.cache_bytes < 64 * self.associativity:
            raise ConfigError("cache size must be a power of two holding at least one set")
        if self.wpq_capacity < 1:
            raise ConfigError("WPQ capacity must be positive")
        self.scheme.validate()
        return self

    def with_scheme(self, kind: SchemeKind, **kw) -> "SimConfig":
        return replace(self, scheme=replace(self.scheme, kind=kind, **kw))


_SIZE_SUFFIX = {"k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20,
                "g": 1 << 30, "gib": 1 << 30, "t": 1 << 40, "tib": 1 << 40}


def parse_size(text) -> int:
    if isinstance(text, int):
        return text
    s = str(text).strip().lower()
    if s.endswith("b") and not s.endswith("ib"):
        s = s[:-1]
    for suf in sorted(_SIZE_SUFFIX, key=len, reverse=True):
        if s.endswith(suf):
            try:
                return int(float(s[: -len(suf)]) * _SIZE_SUFFIX[suf])
            except ValueError:
                break
    try:
        return int(s, 0)
    except ValueError:
        raise ConfigError(f"bad size {text!r}") from None


def read_config_file(path) -> Dict[str, str]:
    """key=value lines; '#' starts a comment."""
    out: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def build_config(values: Dict[str, object]) -> SimConfig:
    """Build a validated SimConfig from flat string/int settings."""
    v = dict(values)
    known = {"memory_size", "cache_size", "associativity", "scheme", "persistence_limit",
             "ecc_engines", "seed", "read_ns", "write_ns", "hash_ns", "wpq_capacity",
             "osiris_window", "cm_write_always", "recover_counters_at"}
    unknown = set(v) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        scheme = SchemeConfig(
            kind=SchemeKind.parse(str(v.get("scheme", "phoenixplus"))),
            persistence_limit=int(v.get("persistence_limit", 4)),
            ecc_engines=int(v.get("ecc_engines", 4)),
            osiris_window=int(v["osiris_window"]) if v.get("osiris_window") not in (None, "") else None,
            cm_write_always=str(v.get("cm_write_always", "false")).lower() in ("1", "true", "yes"),
            recover_counters_at=str(v.get("recover_counters_at", "recovery")),
        )
        lat = Latencies(int(v.get("read_ns", 60)), int(v.get("write_ns", 150)), int(v.get("hash_ns", 40)))
        cfg = SimConfig(
            memory_bytes=parse_size(v.get("memory_size", 1 << 20)),
            cache_bytes=parse_size(v.get("cache_size", 262144)),
            associativity=int(v.get("associativity", 8)),
            scheme=scheme,
            seed=int(v.get("seed", 1)),
            latencies=lat,
            wpq_capacity=int(v.get("wpq_capacity", 16)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg.validate()
