"""Set-associative LRU cache of ToC lines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Set

from .errors import ConfigError

if TYPE_CHECKING:
    from .toc import ToCNode


@dataclass
class CacheLine:
    addr: int                 # ToC region line index
    node: "ToCNode"
    level: int
    parent_ctr: int           # parent counter the MAC is bound to
    dirty: bool = False
    writes_since_persist: List[int] = field(default_factory=lambda: [0] * 8)
    lru_stamp: int = 0
    slot: int = -1            # set * associativity + way
    # counter slots still holding the persisted (possibly stale) value
    stale_mask: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.level == 0

    def state(self):
        """Comparable view, ignoring recency."""
        return (self.addr, self.node.pack(), self.dirty, self.level, self.parent_ctr,
                tuple(self.writes_since_persist), self.slot, self.stale_mask)

    def clone(self) -> "CacheLine":
        return CacheLine(self.addr, self.node.clone(), self.level, self.parent_ctr, self.dirty,
                         list(self.writes_since_persist), self.lru_stamp, self.slot,
                         self.stale_mask)


@dataclass(frozen=True)
class CacheGeometry:
    capacity_bytes: int = 262144
    associativity: int = 8
    line_size: int = 64

    @property
    def lines(self) -> int:
        return self.capacity_bytes // self.line_size

    @property
    def sets(self) -> int:
        return self.lines // self.associativity

    def validate(self) -> None:
        if self.associativity < 1 or self.capacity_bytes % (self.line_size * self.associativity):
            raise ConfigError("cache size must be a whole number of sets")
        n = self.sets
        if n < 1 or n & (n - 1):
            raise ConfigError("number of cache sets must be a power of two")


class MetadataCache:
    def __init__(self, geometry: CacheGeometry):
        geometry.validate()
        self.geometry = geometry
        self.assoc = geometry.associativity
        self.nsets = geometry.sets
        self.ways: List[Optional[CacheLine]] = [None] * geometry.lines
        self.index: Dict[int, CacheLine] = {}
        self._clock = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        # slots whose occupant or content changed since the last reset
        self.touched: Set[int] = set()

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, addr: int) -> bool:
        return addr in self.index

    def __iter__(self) -> Iterator[CacheLine]:
        return iter([w for w in self.ways if w is not None])

    def set_of(self, addr: int) -> int:
        return addr % self.nsets

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def lookup(self, addr: int, count: bool = True) -> Optional[CacheLine]:
        line = self.index.get(addr)
        if line is None:
            if count:
                self.misses += 1
            return None
        if count:
            self.hits += 1
        line.lru_stamp = self._tick()
        return line

    def peek(self, addr: int) -> Optional[CacheLine]:
        return self.index.get(addr)

    def fill(self, line: CacheLine) -> Optional[CacheLine]:
        """Insert ``line``; return the LRU victim if the set was full."""
        if line.addr in self.index:
            raise ValueError(f"line {line.addr} already cached")
        base = self.set_of(line.addr) * self.assoc
        victim = None
        way = None
        for w in range(self.assoc):
            if self.ways[base + w] is None:
                way = w
                break
        if way is None:
            way = min(range(self.assoc), key=lambda w: self.ways[base + w].lru_stamp)
            victim = self.ways[base + way]
            del self.index[victim.addr]
            self.evictions += 1
        line.slot = base + way
        line.lru_stamp = self._tick()
        self.ways[line.slot] = line
        self.index[line.addr] = line
        self.touched.add(line.slot)
        return victim

    def install(self, line: CacheLine, slot: int) -> None:
        """Place a line at a fixed slot (used when rebuilding after a crash)."""
        if self.ways[slot] is not None:
            raise ValueError(f"slot {slot} occupied")
        if slot // self.assoc != self.set_of(line.addr):
            raise ValueError(f"line {line.addr} does not map to slot {slot}")
        line.slot = slot
        line.lru_stamp = self._tick()
        self.ways[slot] = line
        self.index[line.addr] = line

    def remove(self, addr: int) -> CacheLine:
        line = self.index.pop(addr)
        self.ways[line.slot] = None
        self.touched.add(line.slot)
        return line

    def touch(self, line: CacheLine) -> None:
        """Record a content change of a resident line."""
        if self.index.get(line.addr) is line:
            self.touched.add(line.slot)

    def snapshot_dirty(self) -> List[CacheLine]:
        return [w.clone() for w in self.ways if w is not None and w.dirty]

    def snapshot(self) -> List[CacheLine]:
        return [w.clone() for w in self.ways if w is not None]
