"""The secure memory controller and its five metadata persistence schemes.

Every access runs as one *event*: NVM writes are staged while the access is
processed and then persisted as a single atomic group together with the new
register values (tree root, cache-mirror root). Reads issued during the event
see the staged values.

Scheme summary (what each persists besides the data line):

* WriteBack: dirty ToC lines on eviction, nothing else; not recoverable.
* Strict: the whole updated leaf-to-root path on every write.
* Anubis: a shadow copy of every metadata cache slot that changed.
* Phoenix: the leaf on every N-th write to a counter, evicted dirty lines,
  intermediate nodes in place whenever they change, and the address of every
  dirty line in the cache mirror (CM).
* Phoenix+: like Phoenix, but a dirty leaf leaving the cache is dropped; its
  counters are rebuilt from the data ECC when the leaf is next fetched.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

from .config import SchemeKind, SimConfig
from .crypto_engine import CryptoEngine, EccBlock
from .errors import DataIntegrityError, UnrecoverableCounter
from .mem_model import (LINE_BYTES, ZERO_LINE, LineAddr, MemoryModel, NvmImage, Region, StepHook,
                        WpqEntry, WriteKind)
from .metadata_cache import CacheGeometry, CacheLine, MetadataCache
from .mirror import MirrorTree, empty_root
from .recovery import osiris_try
from .toc import ARITY, ToCNode, TreeGeometry, TreeOfCounters, format_node, toc_addr

CM_EMPTY = 0
CM_INTERMEDIATE = 1
CM_COUNTER = 2


def cm_entry(line: Optional[CacheLine]) -> bytes:
    """CM line for a cache slot: (kind, ToC index) of a dirty occupant, else zeros."""
    if line is None or not line.dirty:
        return ZERO_LINE
    kind = CM_COUNTER if line.is_leaf else CM_INTERMEDIATE
    return bytes((kind,)) + line.addr.to_bytes(8, "little") + bytes(LINE_BYTES - 9)


def parse_cm_entry(raw: bytes) -> Optional[Tuple[int, int]]:
    """Inverse of :func:`cm_entry`; raises ValueError on a malformed line."""
    if raw == ZERO_LINE:
        return None
    kind = raw[0]
    if kind not in (CM_INTERMEDIATE, CM_COUNTER) or any(raw[9:]):
        raise ValueError("malformed cache mirror entry")
    return kind, int.from_bytes(raw[1:9], "little")


def shadow_line(line: Optional[CacheLine]) -> Tuple[bytes, bytes]:
    """(value, tag sideband) of an Anubis shadow slot.

    Only dirty lines are shadowed; a clean or empty slot reads as empty, so a
    read-only workload never writes the shadow region.
    """
    if line is None or not line.dirty:
        return ZERO_LINE, b""
    tag = bytes((3,)) + line.addr.to_bytes(8, "little")
    return line.node.pack(), tag


def parse_shadow_tag(tag: bytes) -> Optional[Tuple[bool, int]]:
    """(dirty, ToC index) or None for an empty slot."""
    if not tag:
        return None
    if len(tag) != 9 or tag[0] != 3:
        raise ValueError("malformed shadow tag")
    return bool(tag[0] & 2), int.from_bytes(tag[1:9], "little")


def mirror_payload(kind: SchemeKind, line: Optional[CacheLine]) -> bytes:
    """Bytes the cache-mirror tree covers for one slot."""
    if kind is SchemeKind.ANUBIS:
        value, tag = shadow_line(line)
        return value + tag if tag else b""
    if line is None or not line.dirty:
        return b""
    # the home copy, not the cached value: recovery rebuilds counters from data
    return cm_entry(line) + persisted_counters(line)


def persisted_counters(line: CacheLine) -> bytes:
    """Packed counters of the line's NVM home copy, as the controller knows them."""
    return b"".join((c - w).to_bytes(7, "little")
                    for c, w in zip(line.node.counters, line.writes_since_persist))


def region_capacities(config: SimConfig) -> Dict[Region, int]:
    geo = TreeGeometry(config.data_lines)
    return {Region.DATA: config.data_lines, Region.TOC: geo.toc_lines,
            Region.CM: config.cache_lines, Region.SHADOW: config.cache_lines}


@lru_cache(maxsize=8)
def _formatted(data_lines: int, cache_lines: int, seed: int) -> NvmImage:
    crypto = CryptoEngine.from_seed(seed)
    geo = TreeGeometry(data_lines)
    img = NvmImage({Region.DATA: data_lines, Region.TOC: geo.toc_lines,
                    Region.CM: cache_lines, Region.SHADOW: cache_lines})
    zero = bytes(LINE_BYTES)
    for i in range(data_lines):
        blk = crypto.encrypt(zero, i, 0)
        img.put(LineAddr(Region.DATA, i), blk.payload, blk.ecc)
    for idx in range(geo.toc_lines):
        img.put(toc_addr(idx), format_node(crypto, idx))
    img.registers.cm_mt_root = empty_root(crypto.key, cache_lines)
    return img


def format_image(config: SimConfig) -> NvmImage:
    """Fresh NVM: all data zero at counter 0, all ToC counters zero."""
    config.validate()
    return _formatted(config.data_lines, config.cache_lines, config.seed).copy()


@dataclass
class SchemeEvents:
    """Counted where each decision is taken, independently of the NVM model."""

    data_writes: int = 0
    data_reads: int = 0
    shadow_updates: int = 0
    cm_updates: int = 0
    intermediate_persists: int = 0
    leaf_nth: int = 0
    leaf_evict: int = 0
    leaf_drops: int = 0
    strict_nodes: int = 0
    osiris_trials: int = 0
    osiris_rounds: int = 0
    mirror_updates: int = 0
    events: int = 0


class SecureMemory:
    """Counter-mode encrypted, integrity-tree protected NVM with a metadata cache."""

    def __init__(self, config: SimConfig, image: Optional[NvmImage] = None,
                 step_hook: Optional[StepHook] = None):
        config.validate()
        self.config = config
        self.scheme = config.scheme
        self.kind = config.scheme.kind
        self.crypto = CryptoEngine.from_seed(config.seed)
        self.geometry = TreeGeometry(config.data_lines)
        self.cache = MetadataCache(CacheGeometry(config.cache_bytes, config.associativity))
        if image is None:
            image = format_image(config)
        self.mem = MemoryModel(image, config.wpq_capacity, step_hook)
        self.tree = TreeOfCounters(self.geometry, self.crypto, self.cache, self._read_raw,
                                   image.registers.toc_root)
        self.tree.evict_handler = self.on_evict
        self.tree.on_modify = self._on_modify
        if self.kind is SchemeKind.PHOENIXPLUS:
            self.tree.fetch_hook = self.on_fetch_counter
        self.events = SchemeEvents()
        self.pending: List[WpqEntry] = []
        self._pending_latest: Dict[LineAddr, Tuple[bytes, bytes]] = {}
        self._modified: Dict[int, CacheLine] = {}
        self._in_event = False
        nslots = config.cache_lines
        self.mirror = MirrorTree(self.crypto.key, nslots)
        self._payloads: List[bytes] = [b""] * nslots
        self._mirror_changed = False
        # what the CM / shadow regions currently hold, so unchanged slots cost nothing
        self._cm_state: List[bytes] = [image.get(LineAddr(Region.CM, s)) for s in range(nslots)]
        self._shadow_state: List[Tuple[bytes, bytes]] = [
            (image.get(LineAddr(Region.SHADOW, s)), image.get_sideband(LineAddr(Region.SHADOW, s)))
            for s in range(nslots)]

    # -- plumbing ------------------------------------------------------------

    @property
    def image(self) -> NvmImage:
        return self.mem.image

    @property
    def has_mirror(self) -> bool:
        return self.kind in (SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS, SchemeKind.ANUBIS)

    def _read_raw(self, addr: LineAddr) -> bytes:
        hit = self._pending_latest.get(addr)
        if hit is not None:
            return hit[0]
        return self.mem.read_line(addr)

    def load_data(self, data_index: int) -> EccBlock:
        addr = LineAddr(Region.DATA, data_index)
        hit = self._pending_latest.get(addr)
        if hit is not None:
            return EccBlock(*hit)
        value = self.mem.read_line(addr)
        return EccBlock(value, self.image.get_sideband(addr))

    def _stage(self, addr: LineAddr, value: bytes, sideband: bytes = b"",
               kind: WriteKind = WriteKind.DATA) -> None:
        self.pending.append(WpqEntry(addr, value, sideband, kind))
        self._pending_latest[addr] = (value, sideband)

    def _on_modify(self, line: CacheLine) -> None:
        if not line.is_leaf:
            self._modified[line.addr] = line

    def _begin(self) -> None:
        self.pending = []
        self._pending_latest = {}
        self._modified = {}
        self.cache.touched.clear()
        self.tree.root_changed = False
        self._mirror_changed = False
        self._in_event = True

    def _end(self) -> None:
        if self.kind is SchemeKind.PHOENIX:
            self._persist_modified_intermediates()
        if self.kind.uses_cache_mirror:
            self._sync_cache_mirror()
        elif self.kind is SchemeKind.ANUBIS:
            self._sync_shadow()
        toc_root = tuple(self.tree.root) if self.tree.root_changed else None
        cm_root = self.mirror.root if self._mirror_changed else None
        if self._mirror_changed:
            self.events.mirror_updates += 1
        if self.pending:
            self.mem.atomic_commit(self.pending, toc_root=toc_root, cm_mt_root=cm_root)
        elif toc_root is not None or cm_root is not None:
            self.mem.set_registers(toc_root=toc_root, cm_mt_root=cm_root)
        self.pending = []
        self._pending_latest = {}
        self._modified = {}
        self.cache.touched.clear()
        self._in_event = False
        self.events.events += 1

    def _persist_modified_intermediates(self) -> None:
        for idx in sorted(self._modified):
            line = self._modified[idx]
            if self.cache.peek(idx) is line and line.dirty:
                self._stage(toc_addr(idx), line.node.pack(), kind=WriteKind.INTERMEDIATE)
                line.writes_since_persist = [0] * ARITY
                self.events.intermediate_persists += 1

    def _set_payload(self, slot: int, payload: bytes) -> None:
        if payload != self._payloads[slot]:
            self._payloads[slot] = payload
            self.mirror.set(slot, payload)
            self._mirror_changed = True

    def _sync_cache_mirror(self) -> None:
        always = self.scheme.cm_write_always
        for slot in sorted(self.cache.touched):
            occ = self.cache.ways[slot]
            entry = cm_entry(occ)
            if entry != self._cm_state[slot] or (always and occ is not None and occ.dirty):
                self._stage(LineAddr(Region.CM, slot), entry, kind=WriteKind.CM)
                self._cm_state[slot] = entry
                self.events.cm_updates += 1
            self._set_payload(slot, mirror_payload(self.kind, occ))

    def _sync_shadow(self) -> None:
        for slot in sorted(self.cache.touched):
            occ = self.cache.ways[slot]
            value, tag = shadow_line(occ)
            if (value, tag) != self._shadow_state[slot]:
                self._stage(LineAddr(Region.SHADOW, slot), value, tag, kind=WriteKind.SHADOW)
                self._shadow_state[slot] = (value, tag)
                self.events.shadow_updates += 1
            self._set_payload(slot, mirror_payload(self.kind, occ))

    def rebuild_mirror(self) -> None:
        """Recompute the mirror tree from the current cache contents."""
        payloads = {}
        for slot, occ in enumerate(self.cache.ways):
            p = mirror_payload(self.kind, occ)
            self._payloads[slot] = p
            if p:
                payloads[slot] = p
        self.mirror = MirrorTree.build(self.crypto.key, self.config.cache_lines, payloads)

    # -- Phoenix+ lazy counter recovery -------------------------------------

    def on_fetch_counter(self, line: CacheLine) -> None:
        """A leaf fetched under Phoenix+ may lag its true counters by < N.

        Slots are resolved lazily, each against its own data line, when first
        used; until then they hold the persisted value.
        """
        line.stale_mask = (1 << ARITY) - 1

    def _data_index(self, leaf: CacheLine, slot: int) -> int:
        return (leaf.addr - self.geometry.level_offsets[0]) * ARITY + slot

    def _resolve(self, line: CacheLine, slot: int, block: Optional[EccBlock] = None) -> None:
        if not line.stale_mask >> slot & 1:
            return
        data_index = self._data_index(line, slot)
        if block is None:
            block = self.load_data(data_index)
            self.events.data_reads += 1
        persisted = line.node.counters[slot]
        window = self.scheme.window
        found, trials = osiris_try(persisted, block, data_index, self.crypto.key, window)
        self.events.osiris_trials += trials
        self.events.osiris_rounds += -(-trials // self.scheme.ecc_engines)
        if found is None:
            raise UnrecoverableCounter(data_index, persisted, window)
        line.stale_mask &= ~(1 << slot)
        if found != persisted:
            line.node.counters[slot] = found
            line.writes_since_persist[slot] = found - persisted
            line.node.mac = self.tree.mac_of(line.addr, line.node, line.parent_ctr)
            self.cache.touch(line)

    def _resolve_all(self, line: CacheLine) -> None:
        for s in range(ARITY):
            self._resolve(line, s)

    # -- accesses ------------------------------------------------------------

    def read(self, data_index: int) -> bytes:
        self._begin()
        leaf_idx, slot = self.geometry.leaf_of(data_index)
        block = self.load_data(data_index)
        line = self.tree.get(leaf_idx)
        self._resolve(line, slot, block)
        plain, ok = self.crypto.decrypt(block, data_index, line.node.counters[slot])
        if not ok:
            raise DataIntegrityError(data_index)
        self._end()
        return plain

    def write(self, data_index: int, plain: bytes) -> None:
        if len(plain) != LINE_BYTES:
            raise ValueError("data lines are 64 bytes")
        self._begin()
        self.on_data_write(data_index, plain)
        self._end()

    def on_data_write(self, data_index: int, plain: bytes) -> None:
        if self.kind is SchemeKind.STRICT:
            lines = self.tree.update_path_eager(data_index)
            _, slot = self.geometry.leaf_of(data_index)
            self._stage_data(data_index, plain, lines[0].node.counters[slot])
            for ln in lines:
                self._stage(toc_addr(ln.addr), ln.node.pack(), kind=WriteKind.STRICT_PATH)
                self.events.strict_nodes += 1
            return
        leaf_idx, slot = self.geometry.leaf_of(data_index)
        if self.kind is SchemeKind.PHOENIXPLUS:
            line = self.tree.get(leaf_idx)
            self._resolve(line, slot)
        line, slot = self.tree.update_leaf_lazy(data_index)
        self._stage_data(data_index, plain, line.node.counters[slot])
        if (self.kind.uses_cache_mirror
                and line.writes_since_persist[slot] >= self.scheme.persistence_limit):
            # the persisted copy must carry true counters in every slot
            self._resolve_all(line)
            self._stage(toc_addr(line.addr), line.node.pack(), kind=WriteKind.LEAF_NTH)
            line.writes_since_persist = [0] * ARITY
            self.events.leaf_nth += 1

    def _stage_data(self, data_index: int, plain: bytes, counter: int) -> None:
        blk = self.crypto.encrypt(plain, data_index, counter)
        self._stage(LineAddr(Region.DATA, data_index), blk.payload, blk.ecc)
        self.events.data_writes += 1

    def on_evict(self, victim: CacheLine) -> None:
        if not victim.dirty or self.kind is SchemeKind.STRICT:
            return
        if self.kind is SchemeKind.PHOENIXPLUS and victim.is_leaf:
            # persisted copy lags by < N and still verifies against the
            # unchanged parent; the data ECC restores the rest on refetch
            self.events.leaf_drops += 1
            return
        self.tree.propagate_on_evict(victim)
        if victim.is_leaf:
            self._stage(toc_addr(victim.addr), victim.node.pack(), kind=WriteKind.LEAF_EVICT)
            self.events.leaf_evict += 1
        else:
            self._stage(toc_addr(victim.addr), victim.node.pack(), kind=WriteKind.INTERMEDIATE)
            self.events.intermediate_persists += 1

    def flush(self) -> None:
        """Write every dirty line back (children before parents) and empty the cache."""
        self._begin()
        for level in range(self.geometry.root_level):
            dirty = sorted(ln.addr for ln in self.cache if ln.dirty and ln.level == level)
            for addr in dirty:
                ln = self.cache.peek(addr)
                if ln is not None and ln.dirty:
                    self.tree.evict(addr)
        for ln in sorted(self.cache, key=lambda l: l.addr):
            self.cache.remove(ln.addr)
        self._end()

    def verify_all(self) -> None:
        """Check every stored ToC node and every data line; raises on the first failure."""
        trusted = {ln.addr: ln.node for ln in self.cache}
        for idx in range(self.geometry.toc_lines):
            if idx not in trusted:
                self.tree.verify_stored(idx, trusted)
        for i in range(self.config.data_lines):
            self.read(i)

    # -- inspection ----------------------------------------------------------

    def dirty_state(self) -> Tuple:
        return tuple(sorted(ln.state() for ln in self.cache if ln.dirty))

    def full_state(self) -> Tuple:
        return tuple(sorted(ln.state() for ln in self.cache))

    def recoverable_state(self) -> Tuple:
        """The part of the cache a recovery must reproduce exactly.

        Phoenix+ may hold slots it has not yet resolved; those are compared by
        their true counter, and the cached MAC (derived) is left out.
        """
        if self.kind is not SchemeKind.PHOENIXPLUS:
            return self.dirty_state()
        out = []
        for ln in self.cache:
            if not ln.dirty:
                continue
            base = self._data_index(ln, 0)
            ctrs = [self.true_counter(base + s) for s in range(ARITY)]
            wsp = [c - (old - w) for c, old, w in
                   zip(ctrs, ln.node.counters, ln.writes_since_persist)]
            out.append((ln.addr, tuple(ctrs), ln.level, ln.parent_ctr, tuple(wsp), ln.slot))
        return tuple(sorted(out))

    def true_counter(self, data_index: int) -> int:
        """True counter of a data line, without side effects on the cache."""
        leaf_idx, slot = self.geometry.leaf_of(data_index)
        line = self.cache.peek(leaf_idx)
        if line is not None and not line.stale_mask >> slot & 1:
            return line.node.counters[slot]
        node = line.node if line is not None else ToCNode.unpack(self.image.get(toc_addr(leaf_idx)))
        block = EccBlock(self.image.get(LineAddr(Region.DATA, data_index)),
                         self.image.get_sideband(LineAddr(Region.DATA, data_index)))
        found, _ = osiris_try(node.counters[slot], block, data_index, self.crypto.key,
                              self.scheme.window)
        if found is None:
            raise UnrecoverableCounter(data_index, node.counters[slot], self.scheme.window)
        return found
