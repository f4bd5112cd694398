"""The persistence boundary: NVM image, persistent registers, and the WPQ.

Lines are stored sparsely; a line that was never written reads as 64 zero
bytes. Some regions carry a small sideband per line (the ECC symbol for data
lines, the tag for shadow lines) which travels with the line on every write.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Tuple

LINE_BYTES = 64
ZERO_LINE = bytes(LINE_BYTES)
SNAPSHOT_MAGIC = b"PHNX1"


class Region(IntEnum):
    DATA = 0
    TOC = 1
    CM = 2
    SHADOW = 3


class LineAddr(NamedTuple):
    region: Region
    index: int


class WriteKind(IntEnum):
    """Accounting category attached to every NVM line write."""

    DATA = 0
    SHADOW = 1
    CM = 2
    INTERMEDIATE = 3
    LEAF_NTH = 4
    LEAF_EVICT = 5
    STRICT_PATH = 6


class AddressError(IndexError):
    pass


class CommitError(RuntimeError):
    """Misuse of the atomic-commit protocol."""


@dataclass(frozen=True)
class WpqEntry:
    addr: LineAddr
    value: bytes
    sideband: bytes = b""
    kind: WriteKind = WriteKind.DATA


@dataclass
class PersistentRegisters:
    toc_root: Tuple[int, ...] = (0,) * 8
    cm_mt_root: bytes = bytes(64)
    done_bit: bool = False
    staged_writes: List[WpqEntry] = field(default_factory=list)
    # register values that become current when the staged group completes
    staged_toc_root: Optional[Tuple[int, ...]] = None
    staged_cm_mt_root: Optional[bytes] = None


class NvmImage:
    """Byte-addressable persistent memory plus the on-chip persistent registers."""

    def __init__(self, capacities: Dict[Region, int]):
        self.capacities = {Region(r): int(c) for r, c in capacities.items()}
        for r in Region:
            self.capacities.setdefault(r, 0)
        self.lines: Dict[LineAddr, bytes] = {}
        self.sideband: Dict[LineAddr, bytes] = {}
        self.registers = PersistentRegisters()

    def check(self, addr: LineAddr) -> None:
        cap = self.capacities.get(addr.region, 0)
        if not 0 <= addr.index < cap:
            raise AddressError(f"{addr.region.name}[{addr.index}] outside capacity {cap}")

    def get(self, addr: LineAddr) -> bytes:
        self.check(addr)
        return self.lines.get(addr, ZERO_LINE)

    def get_sideband(self, addr: LineAddr) -> bytes:
        return self.sideband.get(addr, b"")

    def put(self, addr: LineAddr, value: bytes, sideband: bytes = b"") -> None:
        self.check(addr)
        if len(value) != LINE_BYTES:
            raise ValueError("NVM lines are exactly 64 bytes")
        self.lines[addr] = bytes(value)
        if sideband:
            self.sideband[addr] = bytes(sideband)
        else:
            self.sideband.pop(addr, None)

    def apply(self, entries: Iterable[WpqEntry]) -> None:
        for e in entries:
            self.put(e.addr, e.value, e.sideband)

    def replay_staged(self) -> bool:
        """Complete an interrupted atomic group. Returns True if one was pending."""
        regs = self.registers
        if not regs.done_bit:
            # staged but never armed: the group never happened
            regs.staged_writes = []
            regs.staged_toc_root = regs.staged_cm_mt_root = None
            return False
        self.apply(regs.staged_writes)
        if regs.staged_toc_root is not None:
            regs.toc_root = regs.staged_toc_root
        if regs.staged_cm_mt_root is not None:
            regs.cm_mt_root = regs.staged_cm_mt_root
        regs.staged_writes = []
        regs.staged_toc_root = regs.staged_cm_mt_root = None
        regs.done_bit = False
        return True

    def copy(self) -> "NvmImage":
        img = NvmImage.__new__(NvmImage)
        img.capacities = dict(self.capacities)
        img.lines = dict(self.lines)
        img.sideband = dict(self.sideband)
        img.registers = copy.deepcopy(self.registers)
        return img

    def region_lines(self, region: Region) -> Dict[int, bytes]:
        return {a.index: v for a, v in self.lines.items() if a.region == region}

    def same_content(self, other: "NvmImage", regions: Iterable[Region] = tuple(Region)) -> bool:
        for r in regions:
            mine = {a: v for a, v in self.lines.items() if a.region == r and v != ZERO_LINE}
            theirs = {a: v for a, v in other.lines.items() if a.region == r and v != ZERO_LINE}
            if mine != theirs:
                return False
            sb1 = {a: v for a, v in self.sideband.items() if a.region == r}
            sb2 = {a: v for a, v in other.sideband.items() if a.region == r}
            if sb1 != sb2:
                return False
        return True

    # -- snapshot file -------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray(SNAPSHOT_MAGIC)
        out += struct.pack("<I", len(Region))
        for r in Region:
            count = sum(1 for a in self.lines if a.region == r)
            out += struct.pack("<BQQ", int(r), self.capacities[r], count)
        regs = self.registers
        out += struct.pack("<8Q", *regs.toc_root)
        out += regs.cm_mt_root
        out += struct.pack("<B", int(regs.done_bit))
        out += struct.pack("<I", len(regs.staged_writes))
        for e in regs.staged_writes:
            out += _pack_entry(e)
        out += _pack_opt_root(regs.staged_toc_root)
        out += struct.pack("<B", regs.staged_cm_mt_root is not None)
        if regs.staged_cm_mt_root is not None:
            out += regs.staged_cm_mt_root
        for a in sorted(self.lines):
            out += struct.pack("<BQ", int(a.region), a.index)
            out += self.lines[a]
            sb = self.sideband.get(a, b"")
            out += struct.pack("<B", len(sb)) + sb
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NvmImage":
        if blob[:5] != SNAPSHOT_MAGIC:
            raise ValueError("not a PHNX1 snapshot")
        pos = 5
        (nreg,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        caps, counts = {}, {}
        for _ in range(nreg):
            r, cap, cnt = struct.unpack_from("<BQQ", blob, pos)
            pos += 17
            caps[Region(r)] = cap
            counts[Region(r)] = cnt
        img = cls(caps)
        regs = img.registers
        regs.toc_root = struct.unpack_from("<8Q", blob, pos)
        pos += 64
        regs.cm_mt_root = blob[pos:pos + 64]
        pos += 64
        regs.done_bit = bool(blob[pos])
        pos += 1
        (nstaged,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        for _ in range(nstaged):
            e, pos = _unpack_entry(blob, pos)
            regs.staged_writes.append(e)
        has_root = blob[pos]
        pos += 1
        if has_root:
            regs.staged_toc_root = struct.unpack_from("<8Q", blob, pos)
            pos += 64
        has_cm = blob[pos]
        pos += 1
        if has_cm:
            regs.staged_cm_mt_root = blob[pos:pos + 64]
            pos += 64
        for _ in range(sum(counts.values())):
            r, idx = struct.unpack_from("<BQ", blob, pos)
            pos += 9
            addr = LineAddr(Region(r), idx)
            value = blob[pos:pos + 64]
            pos += 64
            sblen = blob[pos]
            pos += 1
            img.lines[addr] = value
            if sblen:
                img.sideband[addr] = blob[pos:pos + sblen]
            pos += sblen
        return img

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NvmImage":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _pack_entry(e: WpqEntry) -> bytes:
    return (struct.pack("<BQB", int(e.addr.region), e.addr.index, int(e.kind)) + e.value
            + struct.pack("<B", len(e.sideband)) + e.sideband)


def _unpack_entry(blob: bytes, pos: int) -> Tuple[WpqEntry, int]:
    r, idx, kind = struct.unpack_from("<BQB", blob, pos)
    pos += 10
    value = blob[pos:pos + 64]
    pos += 64
    n = blob[pos]
    pos += 1
    sb = blob[pos:pos + n]
    pos += n
    return WpqEntry(LineAddr(Region(r), idx), value, sb, WriteKind(kind)), pos


def _pack_opt_root(root) -> bytes:
    if root is None:
        return b"\x00"
    return b"\x01" + struct.pack("<8Q", *root)


@dataclass
class WriteCounters:
    by_region: Dict[Region, int] = field(default_factory=lambda: {r: 0 for r in Region})
    by_kind: Dict[WriteKind, int] = field(default_factory=lambda: {k: 0 for k in WriteKind})
    reads: int = 0

    @property
    def total(self) -> int:
        return sum(self.by_region.values())


# Hook signature: (commit_seq, step_name, memory_model) -> None
StepHook = Callable[[int, str, "MemoryModel"], None]


class MemoryModel:
    """NVM image with volatile WPQ and the DONE_BIT atomic-group protocol.

    ``step_hook`` is invoked after every internal step of ``atomic_commit``;
    crash-injection harnesses use it to capture ``crash()`` images mid-commit.
    """

    def __init__(self, image: NvmImage, wpq_capacity: int = 16,
                 step_hook: Optional[StepHook] = None):
        if wpq_capacity < 1:
            raise ValueError("WPQ capacity must be positive")
        self.image = image
        self.wpq: List[WpqEntry] = []
        self.wpq_capacity = wpq_capacity
        self.counters = WriteCounters()
        self.step_hook = step_hook
        self.commit_seq = 0
        self._in_flight = False

    def read_line(self, addr: LineAddr) -> bytes:
        self.counters.reads += 1
        for e in reversed(self.wpq):
            if e.addr == addr:
                return e.value
        return self.image.get(addr)

    def write_line(self, addr: LineAddr, value: bytes, sideband: bytes = b"",
                   kind: WriteKind = WriteKind.DATA) -> None:
        self.image.put(addr, value, sideband)
        self.counters.by_region[addr.region] += 1
        self.counters.by_kind[kind] += 1

    def _step(self, name: str) -> None:
        if self.step_hook is not None:
            self.step_hook(self.commit_seq, name, self)

    def atomic_commit(self, entries: List[WpqEntry], toc_root=None, cm_mt_root=None) -> None:
        """Persist ``entries`` (and optional register updates) as one atomic group."""
        if self._in_flight:
            raise CommitError("another atomic commit is in flight")
        if not entries:
            raise CommitError("atomic commit needs at least one entry")
        for e in entries:
            self.image.check(e.addr)
        self._in_flight = True
        regs = self.image.registers
        try:
            self._step("begin")
            regs.staged_writes = list(entries)
            regs.staged_toc_root = tuple(toc_root) if toc_root is not None else None
            regs.staged_cm_mt_root = cm_mt_root
            self._step("staged")
            regs.done_bit = True
            self._step("done_bit_set")
            for start in range(0, len(entries), self.wpq_capacity):
                chunk = entries[start:start + self.wpq_capacity]
                self.wpq.extend(chunk)
                self._step(f"wpq_fill_{start // self.wpq_capacity}")
                while self.wpq:
                    e = self.wpq.pop(0)
                    self.write_line(e.addr, e.value, e.sideband, e.kind)
                self._step(f"wpq_drained_{start // self.wpq_capacity}")
            if toc_root is not None:
                regs.toc_root = tuple(toc_root)
            if cm_mt_root is not None:
                regs.cm_mt_root = cm_mt_root
            regs.done_bit = False
            regs.staged_writes = []
            regs.staged_toc_root = regs.staged_cm_mt_root = None
            self._step("complete")
        finally:
            self._in_flight = False
            self.commit_seq += 1

    def set_registers(self, toc_root=None, cm_mt_root=None) -> None:
        """Register-only update (no NVM lines touched); registers are persistent."""
        regs = self.image.registers
        if toc_root is not None:
            regs.toc_root = tuple(toc_root)
        if cm_mt_root is not None:
            regs.cm_mt_root = cm_mt_root

    def crash(self) -> NvmImage:
        """Power loss: ADR drains the WPQ, volatile state is gone."""
        img = self.image.copy()
        img.apply(self.wpq)
        return img

    def crash_in_place(self) -> NvmImage:
        self.image.apply(self.wpq)
        self.wpq = []
        self._in_flight = False
        return self.image
