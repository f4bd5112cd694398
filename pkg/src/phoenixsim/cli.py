"""Command-line experiment runner.

Exit codes: 0 ok, 2 usage or configuration error, 3 integrity violation,
4 recovery failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import Latencies, SchemeKind, SimConfig, build_config, parse_size, read_config_file
from .crypto_engine import CryptoEngine
from .errors import ConfigError, IntegrityError, RecoveryNotSupported, SimulationError
from .harness import (Profile, RunStats, compare, crash_sweep, enumerate_crash_points,
                      gen_trace, read_trace, run, select_points, stats_csv, stats_json,
                      tamper_sweep)
from .recovery import fitted_hash_ns, recovery_time
from .schemes import format_image
from .toc import TreeGeometry, analytic_levels

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_RECOVERY = 0, 2, 3, 4

# flag dest -> config key
_FLAG_KEYS = {
    "memory_size": "memory_size", "cache_size": "cache_size", "associativity": "associativity",
    "scheme": "scheme", "persistence_limit": "persistence_limit", "ecc_engines": "ecc_engines",
    "seed": "seed", "read_ns": "read_ns", "write_ns": "write_ns", "hash_ns": "hash_ns",
    "osiris_window": "osiris_window",
}

DEFAULT_CACHE_SIZES = ("256K", "512K", "1M", "2M", "4M", "8M")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, trace: bool = True) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", metavar="FILE", help="key=value settings file")
    g.add_argument("--memory-size", help="protected memory size, e.g. 16M")
    g.add_argument("--cache-size", help="metadata cache size (default 256K)")
    g.add_argument("--associativity", type=int)
    g.add_argument("--scheme", help="writeback|strict|anubis|phoenix|phoenixplus")
    g.add_argument("--persistence-limit", type=int)
    g.add_argument("--ecc-engines", type=int)
    g.add_argument("--osiris-window", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--read-ns", type=int)
    g.add_argument("--write-ns", type=int)
    g.add_argument("--hash-ns", type=int)
    if trace:
        t = p.add_argument_group("workload")
        t.add_argument("--trace", metavar="FILE", help="trace file (one 'R addr' / 'W addr hex' per line)")
        t.add_argument("--profile", default="mixed", help="synthetic profile when no trace is given")
        t.add_argument("--length", type=int, default=2000, help="synthetic trace length")
    o = p.add_argument_group("output")
    o.add_argument("--format", choices=("csv", "json"), default="csv")
    o.add_argument("--output", metavar="FILE", help="append results to FILE instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phoenixsim", description="Secure NVM metadata-cache recovery simulator")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    f = sub.add_parser("format", help="write a freshly formatted NVM image")
    _common(f, trace=False)
    f.add_argument("image", help="output image path")

    r = sub.add_parser("run", help="run one scheme over a trace")
    _common(r)

    c = sub.add_parser("compare", help="run several schemes over one trace, normalized to write-back")
    _common(c)
    c.add_argument("--schemes", default=",".join(k.value for k in SchemeKind))

    s = sub.add_parser("sweep-recovery", help="modeled worst-case recovery time per cache size")
    _common(s, trace=False)
    s.add_argument("--cache-sizes", default=",".join(DEFAULT_CACHE_SIZES))
    s.add_argument("--fitted-hash", action="store_true",
                   help="use the hash latency fitted to 0.12 s for Phoenix+ at 4 MiB")

    k = sub.add_parser("crash-test", help="crash at many points, recover, and check equivalence")
    _common(k)
    k.add_argument("--points", type=int, default=200, help="crash points (0 = all)")
    k.add_argument("--tamper", action="store_true", help="also run the tamper sweep")

    v = sub.add_parser("vectors", help="emit crypto test vectors as JSON")
    v.add_argument("--seed", type=int, default=1)
    v.add_argument("--count", type=int, default=8)
    v.add_argument("--output", metavar="FILE")

    g = sub.add_parser("geometry", help="tree shape for a memory size")
    g.add_argument("memory_size")
    return p


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> SimConfig:
    """Flags override PHOENIX_SEED, which overrides the config file, which overrides defaults."""
    environ = os.environ if environ is None else environ
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        try:
            values.update(read_config_file(args.config))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    if environ.get("PHOENIX_SEED"):
        values["seed"] = environ["PHOENIX_SEED"]
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            values[key] = val
    return build_config(values)


def _load_trace(args: argparse.Namespace, config: SimConfig) -> tuple:
    if args.trace:
        try:
            return read_trace(args.trace, config.data_lines), Path(args.trace).name
        except OSError as exc:
            raise ConfigError(f"cannot read trace: {exc}") from None
    profile = Profile.parse(args.profile)
    if args.length < 1:
        raise ConfigError("trace length must be positive")
    return gen_trace(profile, args.length, config.seed, config), profile.value


def _emit(args: argparse.Namespace, text_csv: str, text_json: str, header: str = "") -> None:
    """CSV output is append-safe: the header is written only to a new or empty file."""
    if args.format == "json":
        text = text_json if text_json.endswith("\n") else text_json + "\n"
    else:
        text = text_csv
    if not args.output:
        sys.stdout.write(text)
        return
    path = Path(args.output)
    fresh = not path.exists() or path.stat().st_size == 0
    if args.format == "csv" and header and not fresh and text.startswith(header):
        text = text[len(header):]
    with open(path, "a") as fh:
        fh.write(text)


def _stats_out(args: argparse.Namespace, rows: List[RunStats]) -> None:
    csv_text = stats_csv(rows)
    header = csv_text.split("\n", 1)[0] + "\n"
    _emit(args, csv_text, stats_json(rows), header)


def cmd_format(args) -> int:
    config = resolve_config(args)
    img = format_image(config)
    img.save(args.image)
    geo = TreeGeometry(config.data_lines)
    print(f"formatted {args.image}: {config.data_lines} data lines, {geo.toc_lines} ToC lines, "
          f"{config.cache_lines} mirror lines")
    return EXIT_OK


def cmd_run(args) -> int:
    config = resolve_config(args)
    trace, name = _load_trace(args, config)
    base = None
    if config.scheme.kind is not SchemeKind.WRITEBACK:
        base = run(trace, config.with_scheme(SchemeKind.WRITEBACK), name)
    _stats_out(args, [run(trace, config, name, baseline=base)])
    return EXIT_OK


def cmd_compare(args) -> int:
    config = resolve_config(args)
    schemes = [SchemeKind.parse(s) for s in args.schemes.split(",") if s.strip()]
    if not schemes:
        raise ConfigError("no schemes given")
    trace, name = _load_trace(args, config)
    _stats_out(args, compare(trace, config, schemes, name))
    return EXIT_OK


def cmd_sweep_recovery(args) -> int:
    config = resolve_config(args)
    lat = config.latencies
    if args.fitted_hash:
        h = round(fitted_hash_ns(latencies=lat, persistence_limit=config.scheme.persistence_limit,
                                 ecc_engines=config.scheme.ecc_engines))
        lat = Latencies(lat.read_ns, lat.write_ns, h)
    sizes = [parse_size(s) for s in args.cache_sizes.split(",") if s.strip()]
    rows = []
    for size in sizes:
        for kind in (SchemeKind.ANUBIS, SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS):
            ns = recovery_time(kind, size, lat, config.scheme.persistence_limit,
                               config.scheme.ecc_engines)
            rows.append({"scheme": kind.value, "cache_bytes": size, "hash_ns": lat.hash_ns,
                         "recovery_ns": ns, "recovery_s": ns / 1e9})
    header = "scheme,cache_bytes,hash_ns,recovery_ns,recovery_s\n"
    csv_text = header + "".join(f"{r['scheme']},{r['cache_bytes']},{r['hash_ns']},"
                                f"{r['recovery_ns']},{r['recovery_s']:.6f}\n" for r in rows)
    _emit(args, csv_text, json.dumps(rows, indent=2), header)
    return EXIT_OK


def cmd_crash_test(args) -> int:
    config = resolve_config(args)
    trace, name = _load_trace(args, config)
    if config.scheme.kind is SchemeKind.WRITEBACK:
        print("writeback: metadata cache is not recoverable; crash test not attempted")
        return EXIT_RECOVERY
    points = enumerate_crash_points(trace, config)
    sweep = crash_sweep(trace, config, select_points(points, args.points or None))
    print(sweep.summary())
    for p in sweep.points:
        if not p.passed:
            print(f"  FAIL {p}")
    code = EXIT_OK if sweep.ok else EXIT_RECOVERY
    if args.tamper:
        t = tamper_sweep(trace, config)
        print(t.summary())
        for c in t.missed[:20]:
            print(f"  MISSED {c.label}")
        if not t.ok and code == EXIT_OK:
            code = EXIT_INTEGRITY
    return code


def crypto_vectors(seed: int = 1, count: int = 8) -> Dict[str, object]:
    """Deterministic encryption and node-MAC vectors for one key."""
    crypto = CryptoEngine.from_seed(seed)
    enc, macs = [], []
    for i in range(count):
        addr, counter = i * 977 + 3, i * 5
        plain = bytes((i * 31 + j) & 0xFF for j in range(64))
        blk = crypto.encrypt(plain, addr, counter)
        enc.append({"addr": addr, "counter": counter, "plain": plain.hex(),
                    "cipher": blk.payload.hex(), "ecc": blk.ecc.hex()})
        ctrs = [i + j for j in range(8)]
        macs.append({"addr": addr, "counters": ctrs, "parent": 100 + i,
                     "mac": f"{crypto.node_mac(ctrs, 100 + i, addr):016x}"})
    return {"seed": seed, "key": crypto.key.hex(), "encrypt": enc, "node_mac": macs}


def cmd_vectors(args) -> int:
    text = json.dumps(crypto_vectors(args.seed, args.count), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_geometry(args) -> int:
    size = parse_size(args.memory_size)
    print(f"memory {size} bytes: {analytic_levels(size)} tree levels updated per strict write")
    return EXIT_OK


_COMMANDS = {"format": cmd_format, "run": cmd_run, "compare": cmd_compare,
             "sweep-recovery": cmd_sweep_recovery, "crash-test": cmd_crash_test,
             "vectors": cmd_vectors, "geometry": cmd_geometry}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RecoveryNotSupported as exc:
        print(f"recovery failure: {exc}", file=sys.stderr)
        return EXIT_RECOVERY
    except (IntegrityError, SimulationError) as exc:
        print(f"integrity violation: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
