import random

import pytest
from hypothesis import given, strategies as st

from phoenixsim import (Latencies, Outcome, RecoveryNotSupported, SchemeKind, SecureMemory,
                        osiris_try, recover, recovery_time)
from phoenixsim.crypto_engine import decrypt, derive_key, encrypt
from phoenixsim.mem_model import LineAddr, Region
from phoenixsim.recovery import MiB, fitted_hash_ns
from phoenixsim.toc import toc_addr

from conftest import RECOVERABLE, tiny

KEY = derive_key(1)


@given(st.integers(0, 1 << 40), st.integers(0, 3), st.binary(min_size=64, max_size=64))
def test_osiris_recovers_drift_within_window(persisted, drift, plain):
    blk = encrypt(plain, KEY, 17, persisted + drift)
    assert osiris_try(persisted, blk, 17, KEY, 4) == (persisted + drift, drift + 1)


@given(st.integers(0, 1 << 40), st.integers(4, 50))
def test_osiris_fails_beyond_window(persisted, drift):
    blk = encrypt(bytes(64), KEY, 17, persisted + drift)
    assert osiris_try(persisted, blk, 17, KEY, 4) == (None, 4)


def test_osiris_candidate_is_unique():
    """Brute force: within any window exactly one counter passes the ECC check."""
    rng = random.Random(5)
    for _ in range(300):
        true = rng.randrange(1 << 20)
        blk = encrypt(rng.randbytes(64), KEY, 3, true)
        passing = [c for c in range(true - 8, true + 9) if c >= 0 and decrypt(blk, KEY, 3, c)[1]]
        assert passing == [true]


def test_osiris_window_must_be_positive():
    with pytest.raises(ValueError):
        osiris_try(0, encrypt(bytes(64), KEY, 0, 0), 0, KEY, 0)


@pytest.mark.parametrize("kind", RECOVERABLE + (SchemeKind.STRICT,))
def test_fresh_image_recovers_empty(kind):
    mem = SecureMemory(tiny(kind))
    rep = recover(mem.mem.crash(), tiny(kind))
    assert rep.ok and len(rep.memory.cache) == 0 and not rep.replayed_commit


def test_writeback_is_not_recoverable():
    with pytest.raises(RecoveryNotSupported):
        recover(SecureMemory(tiny(SchemeKind.WRITEBACK)).mem.crash(), tiny(SchemeKind.WRITEBACK))


def _busy(kind, n=60, **kw):
    cfg = tiny(kind, **kw)
    mem = SecureMemory(cfg)
    rng = random.Random(2)
    for _ in range(n):
        mem.write(rng.randrange(256), rng.randbytes(64))
    return cfg, mem


@pytest.mark.parametrize("kind", RECOVERABLE)
def test_recovery_restores_dirty_cache(kind):
    cfg, mem = _busy(kind)
    rep = recover(mem.mem.crash(), cfg)
    assert rep.ok
    assert rep.memory.recoverable_state() == mem.recoverable_state()
    assert rep.lines_loaded == sum(ln.dirty for ln in mem.cache) > 0
    assert rep.modeled_time_ns > 0


@pytest.mark.parametrize("kind", [SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS])
def test_tampered_cm_detected(kind):
    cfg, mem = _busy(kind)
    img = mem.mem.crash()
    slot = next(ln.slot for ln in mem.cache if ln.dirty)
    raw = bytearray(img.get(LineAddr(Region.CM, slot)))
    raw[3] ^= 0x10
    img.put(LineAddr(Region.CM, slot), bytes(raw))
    assert recover(img, cfg).outcome is Outcome.INTEGRITY_FAILURE


@pytest.mark.parametrize("kind", [SchemeKind.PHOENIX, SchemeKind.PHOENIXPLUS])
def test_cleared_cm_entry_detected(kind):
    # dropping a dirty line from the list would lose its counters
    cfg, mem = _busy(kind)
    img = mem.mem.crash()
    slot = next(ln.slot for ln in mem.cache if ln.dirty)
    img.put(LineAddr(Region.CM, slot), bytes(64))
    assert recover(img, cfg).outcome is Outcome.INTEGRITY_FAILURE


def test_tampered_shadow_detected():
    cfg, mem = _busy(SchemeKind.ANUBIS)
    img = mem.mem.crash()
    slot = next(ln.slot for ln in mem.cache if ln.dirty)
    a = LineAddr(Region.SHADOW, slot)
    raw = bytearray(img.get(a))
    raw[0] ^= 1
    img.put(a, bytes(raw), img.get_sideband(a))
    assert recover(img, cfg).outcome is Outcome.INTEGRITY_FAILURE


def test_rolled_back_home_copy_detected():
    cfg, mem = _busy(SchemeKind.PHOENIX)
    leaf = next(ln for ln in mem.cache if ln.dirty and not ln.is_leaf)
    img = mem.mem.crash()
    fresh = SecureMemory(cfg).image
    img.put(toc_addr(leaf.addr), fresh.get(toc_addr(leaf.addr)))
    assert recover(img, cfg).outcome is Outcome.INTEGRITY_FAILURE


def test_drift_beyond_window_is_unrecoverable():
    """Negative-test config: a window smaller than the persistence limit loses counters."""
    cfg = tiny(SchemeKind.PHOENIX).with_scheme(SchemeKind.PHOENIX, osiris_window=2)
    mem = SecureMemory(cfg)
    for i in range(3):
        mem.write(0, bytes([i]) * 64)
    rep = recover(mem.mem.crash(), cfg)
    assert rep.outcome is Outcome.UNRECOVERABLE_COUNTER


def test_recovery_replays_interrupted_commit():
    cfg = tiny(SchemeKind.PHOENIX)
    images = []
    mem = SecureMemory(cfg, step_hook=lambda seq, step, mm: images.append((step, mm.crash())))
    mem.write(1, b"x" * 64)
    for step, img in images:
        rep = recover(img, cfg)
        assert rep.ok
        assert rep.replayed_commit == (step not in ("begin", "staged", "complete"))
        want = b"x" * 64 if step not in ("begin", "staged") else bytes(64)
        assert rep.memory.read(1) == want


# -- analytic model ------------------------------------------------------------

SIZES = [256 * 1024 * k for k in (1, 2, 3, 4, 8, 16, 32)]


@pytest.mark.parametrize("kind", [SchemeKind.ANUBIS, SchemeKind.PHOENIXPLUS])
@pytest.mark.parametrize("lat", [Latencies(), Latencies(60, 150, 135)])
def test_model_is_affine_and_under_a_second(kind, lat):
    ts = [recovery_time(kind, s, lat) for s in SIZES]
    slope = (ts[-1] - ts[0]) / (SIZES[-1] - SIZES[0])
    for s, t in zip(SIZES, ts):
        assert t == pytest.approx(ts[0] + slope * (s - SIZES[0]), abs=1)
        assert t < 1e9
    assert ts[1] / ts[0] == pytest.approx(2, rel=1e-5)


def test_model_scales_with_engines():
    slow = recovery_time(SchemeKind.PHOENIXPLUS, 4 * MiB, ecc_engines=1)
    fast = recovery_time(SchemeKind.PHOENIXPLUS, 4 * MiB, ecc_engines=4)
    assert slow > fast


def test_model_for_unrecoverable_schemes_is_zero():
    assert recovery_time(SchemeKind.WRITEBACK, 4 * MiB) == 0
    assert recovery_time("strict", 4 * MiB) == 0


def test_fitted_hash_hits_target():
    h = fitted_hash_ns()
    t = recovery_time(SchemeKind.PHOENIXPLUS, 4 * MiB, Latencies(60, 150, h))
    assert t == pytest.approx(120e6, rel=1e-6)
    assert 100 < h < 200
