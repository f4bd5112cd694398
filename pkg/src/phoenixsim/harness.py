"""Traces, runs, statistics, and the crash / tamper sweeps."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import SchemeKind, SimConfig
from .errors import ConfigError, IntegrityError, RecoveryNotSupported, SimulationError
from .mem_model import LineAddr, NvmImage, Region, WriteKind
from .recovery import Outcome, recover
from .schemes import SecureMemory

CSV_HEADER = ("scheme", "trace", "seed", "data_writes", "shadow", "cm", "intermediate", "leaf_nth",
              "leaf_evict", "strict_path", "total", "extra_pct", "exec_ns")


# -- traces ------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    op: str                         # "R" or "W"
    addr: int                       # data line index
    payload: Optional[bytes] = None

    def __post_init__(self):
        if self.op not in ("R", "W"):
            raise ValueError(f"bad op {self.op!r}")
        if (self.op == "W") != (self.payload is not None):
            raise ValueError("writes carry a payload, reads do not")
        if self.payload is not None and len(self.payload) != 64:
            raise ValueError("payload must be 64 bytes")


class Profile(str, enum.Enum):
    WRITE_HEAVY = "writeheavy"
    READ_HEAVY = "readheavy"
    MIXED = "mixed"
    THRASH = "thrash"

    @classmethod
    def parse(cls, text: str) -> "Profile":
        key = text.strip().lower().replace("-", "").replace("_", "")
        for p in cls:
            if p.value == key:
                return p
        raise ConfigError(f"unknown profile {text!r}")


# (write fraction, footprint in multiples of the metadata cache reach, mean
# burst length); a zero burst means uniform single-line accesses
_PROFILES = {
    Profile.WRITE_HEAVY: (0.85, 4.0, 4),
    Profile.READ_HEAVY: (0.20, 4.0, 4),
    Profile.MIXED: (0.50, 4.0, 4),
    Profile.THRASH: (0.50, 4.0, 0),
}
ZIPF_THETA = 0.8
PAGE_LINES = 64


def cache_reach(config: SimConfig) -> int:
    """Data lines whose leaf counters fit in the metadata cache at once."""
    return config.cache_lines * 8


def footprint(profile: Profile, config: SimConfig) -> int:
    _, mult, _ = _PROFILES[profile]
    return max(PAGE_LINES, min(config.data_lines, int(cache_reach(config) * mult)))


def gen_trace(profile: Profile, length: int, seed: int,
              config: SimConfig = SimConfig(), *, write_fraction: Optional[float] = None,
              burst: Optional[int] = None) -> List[TraceEvent]:
    """Deterministic synthetic trace over the configured memory.

    Locality profiles pick 4 KiB pages by Zipf rank and touch a run of
    consecutive lines in each (geometric length, wrapping within the page);
    a run is all reads or all writes. Thrash draws lines uniformly.
    """
    profile = Profile.parse(profile) if isinstance(profile, str) else profile
    wfrac, _, mean_burst = _PROFILES[profile]
    wfrac = wfrac if write_fraction is None else write_fraction
    mean_burst = mean_burst if burst is None else burst
    n = footprint(profile, config)
    rng = np.random.default_rng(seed)
    addrs: List[int] = []
    writes: List[bool] = []
    if mean_burst <= 0:
        base = rng.permutation(config.data_lines)[:n]
        addrs = [int(base[a]) for a in rng.integers(0, n, size=length)]
        writes = list(rng.random(length) < wfrac)
    else:
        page_count = config.data_lines // PAGE_LINES
        npages = max(1, min(page_count, n // PAGE_LINES))
        pages = rng.permutation(page_count)[:npages]
        weights = 1.0 / np.arange(1, npages + 1) ** ZIPF_THETA
        weights /= weights.sum()
        while len(addrs) < length:
            page = int(pages[rng.choice(npages, p=weights)])
            run_len = int(rng.geometric(1.0 / mean_burst))
            off = int(rng.integers(PAGE_LINES))
            w = bool(rng.random() < wfrac)
            for j in range(run_len):
                addrs.append(page * PAGE_LINES + (off + j) % PAGE_LINES)
                writes.append(w)
        addrs, writes = addrs[:length], writes[:length]
    payloads = rng.bytes(64 * sum(writes))
    out, k = [], 0
    for a, w in zip(addrs, writes):
        if w:
            out.append(TraceEvent("W", a, payloads[64 * k:64 * k + 64]))
            k += 1
        else:
            out.append(TraceEvent("R", a))
    return out


class TraceFormatError(ConfigError):
    def __init__(self, lineno: int, msg: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}")


def format_trace(events: Iterable[TraceEvent]) -> str:
    out = []
    for e in events:
        out.append(f"W {e.addr:x} {e.payload.hex()}" if e.op == "W" else f"R {e.addr:x}")
    return "\n".join(out) + "\n"


def parse_trace(text: str, data_lines: Optional[int] = None) -> List[TraceEvent]:
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op = parts[0].upper()
        try:
            if op == "R" and len(parts) == 2:
                ev = TraceEvent("R", int(parts[1], 16))
            elif op == "W" and len(parts) == 3:
                if len(parts[2]) != 128:
                    raise TraceFormatError(lineno, "payload must be 128 hex characters")
                ev = TraceEvent("W", int(parts[1], 16), bytes.fromhex(parts[2]))
            else:
                raise TraceFormatError(lineno, f"expected 'R <hex>' or 'W <hex> <payload>', got {raw!r}")
        except ValueError as exc:
            if isinstance(exc, TraceFormatError):
                raise
            raise TraceFormatError(lineno, str(exc)) from None
        if ev.addr < 0 or (data_lines is not None and ev.addr >= data_lines):
            raise TraceFormatError(lineno, f"address {ev.addr:#x} outside memory")
        events.append(ev)
    return events


def read_trace(path, data_lines: Optional[int] = None) -> List[TraceEvent]:
    with open(path) as fh:
        return parse_trace(fh.read(), data_lines)


def write_trace(path, events: Iterable[TraceEvent]) -> None:
    with open(path, "w") as fh:
        fh.write(format_trace(events))


# -- golden plaintext model ----------------------------------------------------

class GoldenModel:
    """Plain dictionary memory: what every read must return."""

    def __init__(self):
        self.data: Dict[int, bytes] = {}

    def apply(self, ev: TraceEvent) -> Optional[bytes]:
        if ev.op == "W":
            self.data[ev.addr] = ev.payload
            return None
        return self.data.get(ev.addr, bytes(64))

    def expected(self, addr: int) -> bytes:
        return self.data.get(addr, bytes(64))


def apply_event(mem: SecureMemory, ev: TraceEvent) -> Optional[bytes]:
    if ev.op == "W":
        mem.write(ev.addr, ev.payload)
        return None
    return mem.read(ev.addr)


# -- statistics ----------------------------------------------------------------

@dataclass
class RunStats:
    scheme: str
    trace: str
    seed: int
    data_writes: int = 0
    shadow: int = 0
    cm: int = 0
    intermediate: int = 0
    leaf_nth: int = 0
    leaf_evict: int = 0
    strict_path: int = 0
    total: int = 0
    reads: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    osiris_trials: int = 0
    exec_ns: int = 0
    # relative to write-back on the same trace; None when not computed
    extra_pct: Optional[float] = None
    events: Dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def metadata_writes(self) -> int:
        return self.total - self.data_writes

    def csv_row(self) -> List[str]:
        extra = "" if self.extra_pct is None else f"{self.extra_pct:.4f}"
        return [self.scheme, self.trace, str(self.seed), str(self.data_writes), str(self.shadow),
                str(self.cm), str(self.intermediate), str(self.leaf_nth), str(self.leaf_evict),
                str(self.strict_path), str(self.total), extra, str(self.exec_ns)]

    def as_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d.pop("events")
        return d


def exec_time_ns(mem: SecureMemory) -> int:
    """Critical-path model: NVM latencies plus serialized hash/decode latencies.

    Verification walks serialize (one hash per MAC check); the MACs of one
    update are independent and charged once; a changed mirror root costs one
    hash; Osiris costs ceil(trials / engines) decodes per counter.
    """
    lat = mem.config.latencies
    c = mem.mem.counters
    s = mem.tree.stats
    hashes = s.mac_checks + s.mac_updates + mem.events.mirror_updates + mem.events.osiris_rounds
    return c.reads * lat.read_ns + c.total * lat.write_ns + hashes * lat.hash_ns


def collect_stats(mem: SecureMemory, trace_name: str = "") -> RunStats:
    k = mem.mem.counters.by_kind
    return RunStats(
        scheme=mem.kind.value, trace=trace_name, seed=mem.config.seed,
        data_writes=k[WriteKind.DATA], shadow=k[WriteKind.SHADOW], cm=k[WriteKind.CM],
        intermediate=k[WriteKind.INTERMEDIATE], leaf_nth=k[WriteKind.LEAF_NTH],
        leaf_evict=k[WriteKind.LEAF_EVICT], strict_path=k[WriteKind.STRICT_PATH],
        total=mem.mem.counters.total, reads=mem.mem.counters.reads, hits=mem.cache.hits,
        misses=mem.cache.misses, evictions=mem.cache.evictions,
        osiris_trials=mem.events.osiris_trials, exec_ns=exec_time_ns(mem),
        events=asdict(mem.events))


def run(trace: Sequence[TraceEvent], config: SimConfig, trace_name: str = "",
        baseline: Optional[RunStats] = None, check: bool = True) -> RunStats:
    """Execute every event; with ``check`` every read is compared to the golden model."""
    mem, stats = run_memory(trace, config, trace_name, check)
    if baseline is not None:
        stats.extra_pct = extra_pct(stats, baseline)
    elif config.scheme.kind is SchemeKind.WRITEBACK:
        stats.extra_pct = 0.0
    return stats


def run_memory(trace: Sequence[TraceEvent], config: SimConfig, trace_name: str = "",
               check: bool = True) -> Tuple[SecureMemory, RunStats]:
    mem = SecureMemory(config)
    golden = GoldenModel()
    for i, ev in enumerate(trace):
        got = apply_event(mem, ev)
        want = golden.apply(ev)
        if check and ev.op == "R" and got != want:
            raise SimulationError(f"event {i}: read of line {ev.addr:#x} returned stale data")
    return mem, collect_stats(mem, trace_name)


def extra_pct(stats: RunStats, baseline: RunStats) -> float:
    """(total - write-back total) / write-back total, as a fraction."""
    if baseline.total == 0:
        return 0.0
    return (stats.total - baseline.total) / baseline.total


def compare(trace: Sequence[TraceEvent], config: SimConfig,
            schemes: Sequence[SchemeKind], trace_name: str = "") -> List[RunStats]:
    """Run each scheme on the same trace, normalized to write-back."""
    base = run(trace, config.with_scheme(SchemeKind.WRITEBACK), trace_name)
    out = []
    for kind in schemes:
        out.append(base if kind is SchemeKind.WRITEBACK
                   else run(trace, config.with_scheme(kind), trace_name, baseline=base))
    return out


def stats_csv(rows: Iterable[RunStats], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def stats_json(rows: Iterable[RunStats]) -> str:
    return json.dumps([r.as_dict() for r in rows], indent=2, sort_keys=True)


# -- crash sweep ---------------------------------------------------------------

# Steps of an atomic commit after which the group is guaranteed to land.
PRE_STEPS = ("begin", "staged")


@dataclass(frozen=True)
class CrashPoint:
    event: int        # index of the event in flight (or about to start)
    step: str         # commit step name, or "boundary"

    @property
    def resume_at(self) -> int:
        """First event to replay after recovery."""
        if self.step == "boundary" or self.step in PRE_STEPS:
            return self.event
        return self.event + 1

    @property
    def label(self) -> str:
        return f"{self.event}:{self.step}"


@dataclass
class PointResult:
    point: CrashPoint
    outcome: str
    state_ok: bool = False
    image_ok: bool = False
    replayed_commit: bool = False
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.outcome == Outcome.RECOVERED.value and self.state_ok and self.image_ok


@dataclass
class SweepResult:
    scheme: str
    points: List[PointResult]
    attempted: bool = True

    @property
    def passed(self) -> int:
        return sum(p.passed for p in self.points)

    @property
    def ok(self) -> bool:
        return self.attempted and self.passed == len(self.points)

    def summary(self) -> str:
        if not self.attempted:
            return f"{self.scheme}: recovery not supported ({len(self.points)} points skipped)"
        return f"{self.scheme}: {self.passed}/{len(self.points)} crash points recovered and equivalent"


def final_images_equal(a: NvmImage, b: NvmImage) -> bool:
    ra, rb = a.registers, b.registers
    return (a.same_content(b) and ra.toc_root == rb.toc_root and ra.cm_mt_root == rb.cm_mt_root
            and ra.done_bit == rb.done_bit and not ra.staged_writes and not rb.staged_writes)


def enumerate_crash_points(trace: Sequence[TraceEvent], config: SimConfig) -> List[CrashPoint]:
    """Every crash point a golden run passes through, in order."""
    pts: List[CrashPoint] = []
    current = [0]

    def hook(seq, step, mm):
        pts.append(CrashPoint(current[0], step))

    mem = SecureMemory(config, step_hook=hook)
    for i, ev in enumerate(trace):
        current[0] = i
        pts.append(CrashPoint(i, "boundary"))
        apply_event(mem, ev)
    pts.append(CrashPoint(len(trace), "boundary"))
    return pts


def select_points(all_points: Sequence[CrashPoint], count: Optional[int],
                  seed: int = 0) -> List[CrashPoint]:
    """All points, or ``count`` of them spread evenly (always keeping the first and last)."""
    if count is None or count >= len(all_points):
        return list(all_points)
    idx = np.unique(np.linspace(0, len(all_points) - 1, count).round().astype(int))
    return [all_points[i] for i in idx]


def crash_sweep(trace: Sequence[TraceEvent], config: SimConfig,
                points: Optional[Sequence[CrashPoint]] = None) -> SweepResult:
    """Crash at each point, recover, check the cache, replay the rest, compare final images."""
    if points is None:
        points = enumerate_crash_points(trace, config)
    kind = config.scheme.kind
    if kind is SchemeKind.WRITEBACK:
        return SweepResult(kind.value, [PointResult(p, "NotSupported") for p in points],
                           attempted=False)
    wanted: Dict[Tuple[int, str], CrashPoint] = {(p.event, p.step): p for p in points}
    images: Dict[CrashPoint, NvmImage] = {}
    states: Dict[int, tuple] = {}
    current = [0]

    def hook(seq, step, mm):
        p = wanted.get((current[0], step))
        if p is not None:
            images[p] = mm.crash()

    golden = SecureMemory(config, step_hook=hook)
    need_state = {p.resume_at for p in points}
    for i, ev in enumerate(trace):
        current[0] = i
        if i in need_state:
            states[i] = golden.recoverable_state()
        p = wanted.get((i, "boundary"))
        if p is not None:
            images[p] = golden.mem.crash()
        apply_event(golden, ev)
    n = len(trace)
    states[n] = golden.recoverable_state()
    p = wanted.get((n, "boundary"))
    if p is not None:
        images[p] = golden.mem.crash()
    golden.mem.step_hook = None
    golden.flush()
    final = golden.image

    results = []
    for p in points:
        if p not in images:
            results.append(PointResult(p, "Missing", detail="point not reached by the golden run"))
            continue
        results.append(_check_point(p, images[p], states[p.resume_at], trace, config, final))
    return SweepResult(kind.value, results)


def _check_point(p: CrashPoint, image: NvmImage, state: tuple, trace, config: SimConfig,
                 final: NvmImage) -> PointResult:
    report = recover(image, config)
    res = PointResult(p, report.outcome.value, replayed_commit=report.replayed_commit,
                      detail=report.detail)
    if not report.ok:
        return res
    mem = report.memory
    res.state_ok = mem.recoverable_state() == state
    if not res.state_ok:
        res.detail = "recovered cache differs from the pre-crash cache"
        return res
    for ev in trace[p.resume_at:]:
        apply_event(mem, ev)
    mem.flush()
    res.image_ok = final_images_equal(mem.image, final)
    if not res.image_ok:
        res.detail = "final image differs from the uncrashed run"
    return res


# -- tamper sweep --------------------------------------------------------------

@dataclass
class TamperCase:
    target: str           # class of the tampered line
    addr: LineAddr
    kind: str             # "flip" or "rollback"
    bit: int = -1         # flipped bit (value bits first, then sideband)
    covered: bool = False  # protected by the mirror root: recovery itself must fail
    outcome: str = ""     # detected / inert / missed
    how: str = ""

    @property
    def label(self) -> str:
        what = f"bit {self.bit}" if self.kind == "flip" else "rollback"
        return f"{self.target} {self.addr.region.name}[{self.addr.index}] {what}"


@dataclass
class TamperResult:
    scheme: str
    cases: List[TamperCase]

    def matrix(self) -> Dict[Tuple[str, str], Dict[str, int]]:
        out: Dict[Tuple[str, str], Dict[str, int]] = {}
        for c in self.cases:
            row = out.setdefault((c.target, c.kind), {"detected": 0, "inert": 0, "missed": 0})
            row[c.outcome] += 1
        return out

    @property
    def missed(self) -> List[TamperCase]:
        return [c for c in self.cases if c.outcome == "missed"]

    @property
    def covered_cases(self) -> List[TamperCase]:
        return [c for c in self.cases if c.covered]

    @property
    def ok(self) -> bool:
        """No tamper went unnoticed while changing what the program reads, and
        every covered tamper was caught at recovery."""
        return not self.missed and all(c.outcome == "detected" and c.how == "recovery"
                                       for c in self.covered_cases)

    def summary(self) -> str:
        lines = [f"{self.scheme}: {len(self.cases)} tampers, {len(self.missed)} missed"]
        for (target, kind), row in sorted(self.matrix().items()):
            lines.append(f"  {target:<14} {kind:<8} detected={row['detected']} "
                         f"inert={row['inert']} missed={row['missed']}")
        return "\n".join(lines)


def _flip(image: NvmImage, addr: LineAddr, bit: int) -> None:
    value = bytearray(image.get(addr))
    side = bytearray(image.get_sideband(addr))
    if bit < 512:
        value[bit // 8] ^= 1 << (bit % 8)
    else:
        b = bit - 512
        side[b // 8] ^= 1 << (b % 8)
    image.lines[addr] = bytes(value)
    if side:
        image.sideband[addr] = bytes(side)


def _bits_of(image: NvmImage, addr: LineAddr) -> int:
    return 512 + 8 * len(image.get_sideband(addr))


def _evaluate(case: TamperCase, image: NvmImage, config: SimConfig, golden: GoldenModel) -> None:
    try:
        report = recover(image, config)
    except RecoveryNotSupported:
        raise
    if not report.ok:
        case.outcome, case.how = "detected", "recovery"
        return
    mem = report.memory
    try:
        mem.verify_all()
        mem.flush()
        mem.verify_all()
        wrong = [i for i in range(config.data_lines) if mem.read(i) != golden.expected(i)]
    except IntegrityError as exc:
        case.outcome, case.how = "detected", type(exc).__name__
        return
    if wrong:
        case.outcome, case.how = "missed", f"{len(wrong)} lines read back wrong"
    else:
        case.outcome, case.how = "inert", "no effect on any read"


def tamper_sweep(trace: Sequence[TraceEvent], config: SimConfig, exhaustive_lines: int = 2,
                 samples: int = 40, rollbacks: int = 100, seed: int = 0,
                 progress: Optional[Callable[[TamperCase], None]] = None) -> TamperResult:
    """Tamper with the crash image left by ``trace`` and classify each attempt.

    * every bit of up to ``exhaustive_lines`` mirror lines (CM or shadow) and of
      the home copies of up to ``exhaustive_lines`` mirror-covered ToC lines;
    * ``samples`` random bit flips each on other ToC lines and on data lines;
    * up to ``rollbacks`` live metadata lines replaced by an older value.

    Data-line rollbacks are not attempted: under Phoenix+ an old ciphertext
    whose counter still lies in the recovery window decrypts cleanly.
    """
    kind = config.scheme.kind
    if kind is SchemeKind.WRITEBACK:
        raise RecoveryNotSupported("write-back images cannot be recovered")
    history: Dict[LineAddr, List[Tuple[bytes, bytes]]] = {}
    fmt = SecureMemory(config).image

    def hook(seq, step, mm):
        if step == "staged":
            for e in mm.image.registers.staged_writes:
                h = history.setdefault(e.addr, [])
                if not h or h[-1] != (e.value, e.sideband):
                    h.append((e.value, e.sideband))

    mem = SecureMemory(config, step_hook=hook)
    golden = GoldenModel()
    for ev in trace:
        apply_event(mem, ev)
        golden.apply(ev)
    base = mem.mem.crash()
    base.replay_staged()
    rng = np.random.default_rng(seed)

    mirror_region = Region.SHADOW if kind is SchemeKind.ANUBIS else Region.CM
    mirror_slots = [LineAddr(mirror_region, s) for s in range(config.cache_lines)]
    covered_toc: List[LineAddr] = []
    if kind.uses_cache_mirror:
        covered_toc = [LineAddr(Region.TOC, ln.addr) for ln in sorted(mem.cache, key=lambda l: l.addr)
                       if ln.dirty]
    live_mirror = [a for a in mirror_slots if base.get(a) != bytes(64) or base.get_sideband(a)]
    other_toc = [LineAddr(Region.TOC, i) for i in range(mem.geometry.toc_lines)
                 if LineAddr(Region.TOC, i) not in set(covered_toc)]
    data = [LineAddr(Region.DATA, i) for i in range(config.data_lines)]

    cases: List[Tuple[TamperCase, NvmImage]] = []

    def flips(target: str, addrs: List[LineAddr], covered: bool, exhaustive: bool) -> None:
        if not addrs:
            return
        if exhaustive:
            for a in addrs[:exhaustive_lines]:
                for bit in range(_bits_of(base, a)):
                    cases.append((TamperCase(target, a, "flip", bit, covered), None))
        else:
            for _ in range(samples):
                a = addrs[int(rng.integers(len(addrs)))]
                bit = int(rng.integers(_bits_of(base, a)))
                cases.append((TamperCase(target, a, "flip", bit, covered), None))

    mirror_name = "shadow" if kind is SchemeKind.ANUBIS else "cache-mirror"
    has_mirror = kind is SchemeKind.ANUBIS or kind.uses_cache_mirror
    if has_mirror:
        flips(mirror_name, live_mirror, True, True)
        # a forged entry in an empty slot must not verify either
        empty = [a for a in mirror_slots if a not in live_mirror][:1]
        flips(mirror_name + "-empty", empty, has_mirror, True)
    flips("covered-toc", covered_toc, True, True)
    flips("toc", other_toc, False, False)
    flips("data", data, False, False)

    # rollbacks: lines whose history holds an older value than the current one
    candidates = []
    for a, h in sorted(history.items()):
        if a.region is Region.DATA:
            continue
        cur = (base.get(a), base.get_sideband(a))
        older = [v for v in h if v != cur]
        if not older:
            original = (fmt.get(a), fmt.get_sideband(a))
            if original != cur:
                older = [original]
        if older:
            candidates.append((a, older[-1]))
    order = rng.permutation(len(candidates))[:rollbacks] if candidates else []
    for i in sorted(int(j) for j in order):
        a, old = candidates[i]
        covered = (has_mirror and a.region is mirror_region) or a in covered_toc
        target = mirror_name if a.region is mirror_region else ("covered-toc" if covered else "toc")
        cases.append((TamperCase(target, a, "rollback", covered=covered), old))

    for case, old in cases:
        img = base.copy()
        if case.kind == "flip":
            _flip(img, case.addr, case.bit)
        else:
            img.lines[case.addr] = old[0]
            if old[1]:
                img.sideband[case.addr] = old[1]
            else:
                img.sideband.pop(case.addr, None)
        _evaluate(case, img, config, golden)
        if progress is not None:
            progress(case)
    return TamperResult(kind.value, [c for c, _ in cases])
