"""Post-crash recovery and its analytic time model.

The procedure for Phoenix and Phoenix+:

1. finish an interrupted atomic group if DONE_BIT is set (this is done first
   so every later step sees a consistent image);
2. read every cache mirror (CM) line to learn which ToC lines were dirty;
3. load those lines from their home locations and verify each against its
   parent (recovered, register-resident, or walked from NVM);
4. rebuild the true counters of every dirty leaf slot from the data ECC;
5. rebuild the mirror tree and compare its root with the on-chip register;
6. install the lines, dirty, into a fresh cache at their original slots.

Anubis reads its shadow region instead of steps 2-4.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

from .config import Latencies, SchemeKind, SimConfig
from .crypto_engine import EccBlock, decrypt
from .errors import IntegrityError, RecoveryNotSupported, UnrecoverableCounter
from .mem_model import LineAddr, NvmImage, Region

if TYPE_CHECKING:
    from .schemes import SecureMemory

MiB = 1 << 20


def osiris_try(persisted: int, block: EccBlock, addr, key: bytes,
               window: int) -> Tuple[Optional[int], int]:
    """Find the counter in [persisted, persisted + window) that decrypts ``block``.

    Returns (counter or None, number of trials).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    for k in range(window):
        _, ok = decrypt(block, key, addr, persisted + k)
        if ok:
            return persisted + k, k + 1
    return None, window


class Outcome(str, enum.Enum):
    RECOVERED = "Recovered"
    INTEGRITY_FAILURE = "IntegrityFailure"
    UNRECOVERABLE_COUNTER = "UnrecoverableCounter"


@dataclass
class RecoveryReport:
    outcome: Outcome
    lines_loaded: int = 0
    osiris_trials: int = 0
    replayed_commit: bool = False
    modeled_time_ns: int = 0
    detail: str = ""
    # recovered controller; None unless outcome is RECOVERED
    memory: Optional["SecureMemory"] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.RECOVERED

    def as_dict(self) -> Dict[str, object]:
        return {"outcome": self.outcome.value, "lines_loaded": self.lines_loaded,
                "osiris_trials": self.osiris_trials, "replayed_commit": self.replayed_commit,
                "modeled_time_ns": self.modeled_time_ns}


class _Fail(Exception):
    def __init__(self, outcome: Outcome, detail: str):
        super().__init__(detail)
        self.outcome = outcome
        self.detail = detail


@dataclass
class _Counts:
    region_reads: int = 0
    data_reads: int = 0
    osiris_rounds: int = 0
    trials: int = 0
    loaded: int = 0
    hashes: int = 0


def recover(image: NvmImage, config: SimConfig) -> RecoveryReport:
    """Rebuild a controller from a crashed image. The image is taken over, not copied."""
    from .schemes import SecureMemory

    kind = config.scheme.kind
    if kind is SchemeKind.WRITEBACK:
        raise RecoveryNotSupported("write-back keeps no persistent copy of the metadata cache")
    # a set DONE_BIT means a staged group was armed and must be completed
    replayed = image.replay_staged()
    mem = SecureMemory(config, image)
    counts = _Counts()
    try:
        if kind is SchemeKind.ANUBIS:
            _recover_anubis(mem, counts)
        elif kind.uses_cache_mirror:
            _recover_mirror(mem, counts)
    except _Fail as f:
        return RecoveryReport(f.outcome, counts.loaded, counts.trials, replayed,
                              _actual_time(config.latencies, counts), f.detail)
    except IntegrityError as exc:
        return RecoveryReport(Outcome.INTEGRITY_FAILURE, counts.loaded, counts.trials, replayed,
                              _actual_time(config.latencies, counts), str(exc))
    mem.mem.counters.reads = 0
    mem.tree.stats.tree_reads = mem.tree.stats.mac_checks = 0
    return RecoveryReport(Outcome.RECOVERED, counts.loaded, counts.trials, replayed,
                          _actual_time(config.latencies, counts), memory=mem)


def _actual_time(lat: Latencies, c: _Counts) -> int:
    reads = c.region_reads + c.loaded + c.data_reads
    return reads * lat.read_ns + (c.osiris_rounds + c.hashes) * lat.hash_ns


def _parent_value(mem: "SecureMemory", idx: int, trusted) -> int:
    parent, slot = mem.geometry.parent_of(idx)
    if parent is None:
        return mem.tree.root[slot]
    return mem.tree.verify_stored(parent, trusted).counters[slot]


def _check_slot(mem: "SecureMemory", slot: int, addr: int, seen: Dict[int, int]) -> None:
    if not 0 <= addr < mem.geometry.toc_lines:
        raise _Fail(Outcome.INTEGRITY_FAILURE, f"slot {slot} names ToC line {addr} out of range")
    if mem.cache.set_of(addr) != slot // mem.cache.assoc:
        raise _Fail(Outcome.INTEGRITY_FAILURE, f"ToC line {addr} cannot live in slot {slot}")
    if addr in seen:
        raise _Fail(Outcome.INTEGRITY_FAILURE, f"ToC line {addr} listed twice")
    seen[addr] = slot


def _recover_mirror(mem: "SecureMemory", counts: _Counts) -> None:
    from .metadata_cache import CacheLine
    from .schemes import CM_COUNTER, mirror_payload, parse_cm_entry
    from .toc import ARITY, ToCNode, toc_addr

    img = mem.image
    slots: Dict[int, int] = {}
    for slot in range(mem.config.cache_lines):
        raw = img.get(LineAddr(Region.CM, slot))
        counts.region_reads += 1
        try:
            entry = parse_cm_entry(raw)
        except ValueError:
            raise _Fail(Outcome.INTEGRITY_FAILURE, f"CM slot {slot} malformed") from None
        if entry is None:
            continue
        kind, addr = entry
        _check_slot(mem, slot, addr, slots)
        level = mem.geometry.locate(addr)[0]
        if (kind == CM_COUNTER) != (level == 0):
            raise _Fail(Outcome.INTEGRITY_FAILURE, f"CM slot {slot} kind does not match line {addr}")

    # parents before children so each node is checked against a recovered parent
    order = sorted(slots, key=lambda a: (-mem.geometry.locate(a)[0], a))
    recovered: Dict[int, ToCNode] = {}
    lines: List[CacheLine] = []
    window = mem.scheme.window
    for addr in order:
        node = ToCNode.unpack(img.get(toc_addr(addr)))
        counts.loaded += 1
        level = mem.geometry.locate(addr)[0]
        pv = _parent_value(mem, addr, recovered)
        counts.hashes += 1
        if mem.tree.mac_of(addr, node, pv) != node.mac:
            raise _Fail(Outcome.INTEGRITY_FAILURE, f"MAC mismatch on recovered ToC line {addr}")
        wsp = [0] * ARITY
        if level == 0:
            base = (addr - mem.geometry.level_offsets[0]) * ARITY
            for s in range(ARITY):
                d = base + s
                block = EccBlock(img.get(LineAddr(Region.DATA, d)),
                                 img.get_sideband(LineAddr(Region.DATA, d)))
                counts.data_reads += 1
                found, trials = osiris_try(node.counters[s], block, d, mem.crypto.key, window)
                counts.trials += trials
                counts.osiris_rounds += -(-trials // mem.scheme.ecc_engines)
                if found is None:
                    raise _Fail(Outcome.UNRECOVERABLE_COUNTER,
                                str(UnrecoverableCounter(d, node.counters[s], window)))
                wsp[s] = found - node.counters[s]
                node.counters[s] = found
            node.mac = mem.tree.mac_of(addr, node, pv)
        recovered[addr] = node
        lines.append(CacheLine(addr, node, level, pv, dirty=True, writes_since_persist=wsp,
                               slot=slots[addr]))

    payloads = {ln.slot: mirror_payload(mem.kind, ln) for ln in lines}
    _compare_root(mem, payloads, counts)
    for ln in sorted(lines, key=lambda l: l.slot):
        mem.cache.install(ln, ln.slot)
    mem.rebuild_mirror()


def _recover_anubis(mem: "SecureMemory", counts: _Counts) -> None:
    from .metadata_cache import CacheLine
    from .schemes import parse_shadow_tag
    from .toc import ARITY, ToCNode, toc_addr

    img = mem.image
    found: Dict[int, int] = {}
    payloads: Dict[int, bytes] = {}
    entries = []
    for slot in range(mem.config.cache_lines):
        a = LineAddr(Region.SHADOW, slot)
        value, tag = img.get(a), img.get_sideband(a)
        counts.region_reads += 1
        try:
            parsed = parse_shadow_tag(tag)
        except ValueError:
            raise _Fail(Outcome.INTEGRITY_FAILURE, f"shadow slot {slot} malformed") from None
        if parsed is None:
            if value != bytes(64):
                raise _Fail(Outcome.INTEGRITY_FAILURE, f"shadow slot {slot} is untagged but not empty")
            continue
        dirty, addr = parsed
        _check_slot(mem, slot, addr, found)
        payloads[slot] = value + tag
        entries.append((slot, dirty, addr, ToCNode.unpack(value)))
    _compare_root(mem, payloads, counts)

    nodes = {addr: node for _, _, addr, node in entries}
    lines = []
    for slot, dirty, addr, node in entries:
        level = mem.geometry.locate(addr)[0]
        pv = _parent_value(mem, addr, nodes)
        if mem.tree.mac_of(addr, node, pv) != node.mac:
            raise _Fail(Outcome.INTEGRITY_FAILURE, f"shadow copy of ToC line {addr} fails its MAC")
        persisted = ToCNode.unpack(img.get(toc_addr(addr)))
        wsp = [c - p for c, p in zip(node.counters, persisted.counters)]
        if any(w < 0 for w in wsp) or (not dirty and any(wsp)):
            raise _Fail(Outcome.INTEGRITY_FAILURE, f"shadow copy of ToC line {addr} is older than NVM")
        lines.append(CacheLine(addr, node, level, pv, dirty=dirty,
                               writes_since_persist=wsp if dirty else [0] * ARITY, slot=slot))
    counts.loaded += len(lines)
    for ln in sorted(lines, key=lambda l: l.slot):
        mem.cache.install(ln, ln.slot)
    mem.rebuild_mirror()


def _compare_root(mem: "SecureMemory", payloads: Dict[int, bytes], counts: _Counts) -> None:
    from .mirror import MirrorTree

    tree = MirrorTree.build(mem.crypto.key, mem.config.cache_lines, payloads)
    counts.hashes += tree.hashes
    if tree.root != mem.image.registers.cm_mt_root:
        raise _Fail(Outcome.INTEGRITY_FAILURE, "cache mirror root mismatch")


# -- analytic model ------------------------------------------------------------

def _mirror_hashes(lines: int) -> float:
    """Hashes to rebuild the 8-ary mirror tree: every leaf plus about one
    internal node per seven leaves (padding subtrees are constants)."""
    return lines * 8 / 7


def recovery_time(kind: SchemeKind, cache_bytes: int, latencies: Latencies = Latencies(),
                  persistence_limit: int = 4, ecc_engines: int = 4) -> int:
    """Worst-case recovery time in ns for a full, all-dirty metadata cache.

    Phoenix and Phoenix+: read every CM line, load every listed line, and for
    each of the eight slots of every leaf read the data line and run up to N
    trial decodes on ``ecc_engines`` parallel engines; then rebuild the mirror
    tree. Anubis reads its shadow region and rebuilds the tree. Strict and
    write-back recover nothing.
    """
    kind = SchemeKind.parse(kind) if isinstance(kind, str) and not isinstance(kind, SchemeKind) else kind
    lines = cache_bytes // 64
    lat = latencies
    tree = _mirror_hashes(lines) * lat.hash_ns
    if kind is SchemeKind.ANUBIS:
        return round(lines * lat.read_ns + tree)
    if kind in (SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS):
        rounds = -(-persistence_limit // ecc_engines)
        osiris = lines * 8 * (lat.read_ns + rounds * lat.hash_ns)
        return round(2 * lines * lat.read_ns + osiris + tree)
    return 0


def fitted_hash_ns(target_ns: int = 120_000_000, cache_bytes: int = 4 * MiB,
                   latencies: Latencies = Latencies(), persistence_limit: int = 4,
                   ecc_engines: int = 4) -> float:
    """Hash latency that puts the Phoenix+ model at ``target_ns`` (the model is affine in it)."""
    lo = recovery_time(SchemeKind.PHOENIXPLUS, cache_bytes,
                       Latencies(latencies.read_ns, latencies.write_ns, 0),
                       persistence_limit, ecc_engines)
    hi = recovery_time(SchemeKind.PHOENIXPLUS, cache_bytes,
                       Latencies(latencies.read_ns, latencies.write_ns, 1),
                       persistence_limit, ecc_engines)
    return (target_ns - lo) / (hi - lo)
