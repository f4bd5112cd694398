"""SGX-style tree of counters: geometry, node packing, verification, updates.

Every node is one 64-byte line: eight 56-bit counters and a 64-bit MAC over
those counters, the covering counter in the parent, and the node address.
The top node lives in a persistent on-chip register and carries no MAC.

A parent's counter for a child is the child's *version*. When a modified
child is written back, its version becomes the sum of the child's counters.
Counters only grow, so every distinct persisted child value is bound to a
distinct parent value, and the quiescent tree is a function of the data
write history alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .crypto_engine import COUNTER_MAX, CryptoEngine
from .errors import ConfigError, CounterOverflow, MacMismatch
from .mem_model import LineAddr, Region
from .metadata_cache import CacheLine, MetadataCache

ARITY = 8


@dataclass
class ToCNode:
    counters: List[int] = field(default_factory=lambda: [0] * ARITY)
    mac: int = 0

    def pack(self) -> bytes:
        return b"".join(c.to_bytes(7, "little") for c in self.counters) + self.mac.to_bytes(8, "little")

    @classmethod
    def unpack(cls, raw: bytes) -> "ToCNode":
        if len(raw) != 64:
            raise ValueError("ToC node must be 64 bytes")
        ctrs = [int.from_bytes(raw[7 * i:7 * i + 7], "little") for i in range(ARITY)]
        return cls(ctrs, int.from_bytes(raw[56:64], "little"))

    def clone(self) -> "ToCNode":
        return ToCNode(list(self.counters), self.mac)

    @property
    def version(self) -> int:
        return sum(self.counters)


def tree_levels(data_lines: int) -> int:
    """Levels including the register-resident root (one leaf covers 8 blocks)."""
    n = max(1, -(-data_lines // ARITY))
    levels = 1
    while n > 1:
        n = -(-n // ARITY)
        levels += 1
    return levels


@dataclass(frozen=True)
class TreeGeometry:
    data_lines: int

    def __post_init__(self):
        if self.data_lines < ARITY * ARITY:
            raise ConfigError("need at least 64 data lines for a two-level tree")

    @property
    def level_sizes(self) -> Tuple[int, ...]:
        sizes = [-(-self.data_lines // ARITY)]
        while sizes[-1] > 1:
            sizes.append(-(-sizes[-1] // ARITY))
        return tuple(sizes)

    @property
    def levels(self) -> int:
        return len(self.level_sizes)

    @property
    def root_level(self) -> int:
        return self.levels - 1

    @property
    def level_offsets(self) -> Tuple[int, ...]:
        offs, acc = [], 0
        for s in self.level_sizes:
            offs.append(acc)
            acc += s
        return tuple(offs)

    @property
    def toc_lines(self) -> int:
        """Lines stored in NVM (everything except the root)."""
        return sum(self.level_sizes[:-1])

    def index_of(self, level: int, i: int) -> int:
        return self.level_offsets[level] + i

    def locate(self, idx: int) -> Tuple[int, int]:
        offs = self.level_offsets
        for level in range(self.levels - 1, -1, -1):
            if idx >= offs[level]:
                return level, idx - offs[level]
        raise IndexError(idx)

    def leaf_of(self, data_index: int) -> Tuple[int, int]:
        """(ToC index of the leaf, counter slot) covering a data line."""
        if not 0 <= data_index < self.data_lines:
            raise IndexError(f"data line {data_index} out of range")
        return self.level_offsets[0] + data_index // ARITY, data_index % ARITY

    def parent_of(self, idx: int) -> Tuple[Optional[int], int]:
        """(parent ToC index or None for the root register, slot in parent)."""
        level, i = self.locate(idx)
        if level + 1 == self.root_level:
            return None, i % ARITY
        return self.index_of(level + 1, i // ARITY), i % ARITY

    def path(self, leaf_idx: int) -> List[int]:
        """Stored nodes from leaf up to (not including) the root."""
        out = [leaf_idx]
        while True:
            parent, _ = self.parent_of(out[-1])
            if parent is None:
                return out
            out.append(parent)

    def updates_per_write(self) -> int:
        return self.levels


def analytic_levels(memory_bytes: int) -> int:
    """Tree levels for an arbitrary memory size, computed without allocating."""
    return tree_levels(memory_bytes // 64)


def toc_addr(idx: int) -> LineAddr:
    return LineAddr(Region.TOC, idx)


@dataclass
class TreeStats:
    tree_reads: int = 0
    mac_checks: int = 0
    mac_updates: int = 0
    node_updates_by_level: Dict[int, int] = field(default_factory=dict)

    def updated(self, level: int, n: int = 1) -> None:
        self.node_updates_by_level[level] = self.node_updates_by_level.get(level, 0) + n


class TreeOfCounters:
    """Verification and update logic over a metadata cache.

    ``read_raw`` returns the current persisted bytes of a ToC line (including
    writes staged but not yet committed). ``evict_handler`` receives every
    victim the cache gives up; ``fetch_hook`` runs on every freshly verified
    leaf before it is cached.
    """

    def __init__(self, geometry: TreeGeometry, crypto: CryptoEngine, cache: MetadataCache,
                 read_raw: Callable[[LineAddr], bytes], root: Sequence[int]):
        self.geometry = geometry
        self.crypto = crypto
        self.cache = cache
        self.read_raw = read_raw
        self.root = list(root)
        self.stats = TreeStats()
        self.evict_handler: Optional[Callable[[CacheLine], None]] = None
        self.fetch_hook: Optional[Callable[[CacheLine], None]] = None
        self.on_modify: Optional[Callable[[CacheLine], None]] = None
        self.in_flight: Dict[int, CacheLine] = {}
        self.root_changed = False

    # -- helpers -------------------------------------------------------------

    def mac_of(self, idx: int, node: ToCNode, parent_ctr: int) -> int:
        return self.crypto.node_mac(node.counters, parent_ctr, toc_addr(idx))

    def _resident(self, idx: int) -> Optional[CacheLine]:
        line = self.cache.lookup(idx, count=False)
        return line if line is not None else self.in_flight.get(idx)

    def parent_value(self, idx: int) -> int:
        parent, slot = self.geometry.parent_of(idx)
        if parent is None:
            return self.root[slot]
        return self.get(parent).node.counters[slot]

    # -- read and verify -----------------------------------------------------

    def get(self, idx: int) -> CacheLine:
        """Return a verified, resident copy of node ``idx``."""
        line = self.cache.lookup(idx)
        if line is None:
            line = self.in_flight.get(idx)
        if line is not None:
            return line
        while True:
            line = self._fetch(idx)
            # resolving the parent can cascade into evictions that fetch
            # this very node; keep that copy
            resident = self._resident(idx)
            if resident is not None:
                return resident
            victim = self.cache.fill(line)
            if victim is not None:
                self.handle_victim(victim)
            resident = self._resident(idx)
            if resident is not None:
                return resident

    def verify_path(self, leaf_idx: int) -> CacheLine:
        return self.get(leaf_idx)

    def _fetch(self, idx: int) -> CacheLine:
        # parent first: fetching it may write this node back
        pv = self.parent_value(idx)
        raw = self.read_raw(toc_addr(idx))
        self.stats.tree_reads += 1
        node = ToCNode.unpack(raw)
        self.stats.mac_checks += 1
        level, _ = self.geometry.locate(idx)
        if self.mac_of(idx, node, pv) != node.mac:
            raise MacMismatch(idx, level)
        line = CacheLine(idx, node, level, pv)
        if level == 0 and self.fetch_hook is not None:
            self.fetch_hook(line)
        return line

    def handle_victim(self, victim: CacheLine) -> None:
        self.in_flight[victim.addr] = victim
        try:
            if self.evict_handler is not None:
                self.evict_handler(victim)
        finally:
            self.in_flight.pop(victim.addr, None)

    def evict(self, idx: int) -> None:
        """Force a resident line out through the normal eviction path."""
        victim = self.cache.remove(idx)
        self.cache.evictions += 1
        self.handle_victim(victim)

    # -- updates -------------------------------------------------------------

    def _modified(self, line: CacheLine) -> None:
        self.cache.touch(line)
        if self.on_modify is not None:
            self.on_modify(line)

    def update_leaf_lazy(self, data_index: int) -> Tuple[CacheLine, int]:
        """Bump the data line's counter in the cached leaf only."""
        leaf_idx, slot = self.geometry.leaf_of(data_index)
        line = self.get(leaf_idx)
        if line.node.counters[slot] >= COUNTER_MAX:
            raise CounterOverflow(f"counter for data line {data_index} exhausted")
        line.node.counters[slot] += 1
        line.node.mac = self.mac_of(leaf_idx, line.node, line.parent_ctr)
        line.dirty = True
        line.writes_since_persist[slot] += 1
        self.stats.mac_updates += 1
        self.stats.updated(0)
        self._modified(line)
        return line, slot

    def update_path_eager(self, data_index: int) -> List[CacheLine]:
        """Bump the leaf counter and every ancestor version up to the root.

        Returns the updated stored nodes (leaf first). All MACs are refreshed;
        they are independent so hardware computes them in parallel.
        """
        leaf_idx, slot = self.geometry.leaf_of(data_index)
        path = self.geometry.path(leaf_idx)
        lines = [self.get(i) for i in path]
        # a later get() may have evicted an earlier (clean) node; reuse the
        # resident copy when there is one
        lines = [self._resident(i) or ln for i, ln in zip(path, lines)]
        if lines[0].node.counters[slot] >= COUNTER_MAX:
            raise CounterOverflow(f"counter for data line {data_index} exhausted")
        lines[0].node.counters[slot] += 1
        for child, parent in zip(lines, lines[1:]):
            _, pslot = self.geometry.parent_of(child.addr)
            parent.node.counters[pslot] = self._version(child)
        top = lines[-1]
        _, rslot = self.geometry.parent_of(top.addr)
        self.root[rslot] = self._version(top)
        self.root_changed = True
        for child, parent in zip(lines, lines[1:]):
            _, pslot = self.geometry.parent_of(child.addr)
            child.parent_ctr = parent.node.counters[pslot]
        top.parent_ctr = self.root[rslot]
        for ln in lines:
            ln.node.mac = self.mac_of(ln.addr, ln.node, ln.parent_ctr)
            self.cache.touch(ln)
            self.stats.updated(ln.level)
        self.stats.updated(self.geometry.root_level)
        self.stats.mac_updates += 1
        return lines

    @staticmethod
    def _version(line: CacheLine) -> int:
        v = line.node.version
        if v > COUNTER_MAX:
            raise CounterOverflow(f"version of ToC line {line.addr} exhausted")
        return v

    def propagate_on_evict(self, victim: CacheLine) -> List[Tuple[int, ToCNode]]:
        """Push a dirty victim's new version into its parent.

        The parent is fetched and verified if needed and becomes dirty. The
        victim's MAC is rebound to the new parent value. Returns the victim
        line that must be persisted; the parent is not evicted.
        """
        if not victim.dirty:
            return []
        parent_idx, slot = self.geometry.parent_of(victim.addr)
        version = self._version(victim)
        if parent_idx is None:
            self.root[slot] = version
            self.root_changed = True
        else:
            parent = self.get(parent_idx)
            parent.writes_since_persist[slot] += version - parent.node.counters[slot]
            parent.node.counters[slot] = version
            parent.node.mac = self.mac_of(parent.addr, parent.node, parent.parent_ctr)
            parent.dirty = True
            self.stats.updated(parent.level)
            self._modified(parent)
        victim.parent_ctr = version
        victim.node.mac = self.mac_of(victim.addr, victim.node, version)
        self.stats.mac_updates += 1
        return [(victim.addr, victim.node)]

    # -- quiescent checks ----------------------------------------------------

    def verify_stored(self, idx: int, trusted: Optional[Dict[int, ToCNode]] = None) -> ToCNode:
        """Verify a stored node against its ancestors without touching the cache.

        ``trusted`` maps ToC indices to node values taken as authentic (for
        instance nodes rebuilt during recovery).
        """
        trusted = trusted or {}
        if idx in trusted:
            return trusted[idx]
        node = ToCNode.unpack(self.read_raw(toc_addr(idx)))
        parent, slot = self.geometry.parent_of(idx)
        pv = self.root[slot] if parent is None else self.verify_stored(parent, trusted).counters[slot]
        self.stats.mac_checks += 1
        if self.mac_of(idx, node, pv) != node.mac:
            raise MacMismatch(idx, self.geometry.locate(idx)[0])
        return node


def format_node(crypto: CryptoEngine, idx: int) -> bytes:
    node = ToCNode()
    node.mac = crypto.node_mac(node.counters, 0, toc_addr(idx))
    return node.pack()
