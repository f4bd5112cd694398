from collections import OrderedDict

import pytest
from hypothesis import given, strategies as st

from phoenixsim.errors import ConfigError
from phoenixsim.metadata_cache import CacheGeometry, CacheLine, MetadataCache
from phoenixsim.toc import ToCNode


def mk(addr, dirty=False):
    return CacheLine(addr, ToCNode(), 0, 0, dirty=dirty)


class LruOracle:
    """Per-set OrderedDict, most recent last."""

    def __init__(self, sets, ways):
        self.sets = [OrderedDict() for _ in range(sets)]
        self.ways = ways

    def access(self, addr):
        s = self.sets[addr % len(self.sets)]
        if addr in s:
            s.move_to_end(addr)
            return True, None
        victim = None
        if len(s) == self.ways:
            victim, _ = s.popitem(last=False)
        s[addr] = True
        return False, victim


@given(st.lists(st.integers(0, 63), max_size=300), st.sampled_from([(512, 2), (1024, 4), (512, 8)]))
def test_lru_matches_oracle(addrs, shape):
    size, ways = shape
    cache = MetadataCache(CacheGeometry(size, ways))
    oracle = LruOracle(cache.nsets, ways)
    for a in addrs:
        hit, want_victim = oracle.access(a)
        line = cache.lookup(a)
        assert (line is not None) == hit
        if line is None:
            victim = cache.fill(mk(a))
            assert (victim.addr if victim else None) == want_victim
        assert len(cache) == sum(len(s) for s in oracle.sets)
    assert cache.hits + cache.misses == len(addrs)
    for line in cache:
        assert cache.ways[line.slot] is line
        assert line.slot // ways == cache.set_of(line.addr)


def test_geometry_validation():
    with pytest.raises(ConfigError):
        MetadataCache(CacheGeometry(1000, 8))
    with pytest.raises(ConfigError):
        MetadataCache(CacheGeometry(1024, 3))
    g = CacheGeometry(262144, 8)
    assert g.lines == 4096 and g.sets == 512


def test_fill_twice_is_an_error():
    cache = MetadataCache(CacheGeometry(512, 2))
    cache.fill(mk(1))
    with pytest.raises(ValueError):
        cache.fill(mk(1))


def test_install_checks_slot():
    cache = MetadataCache(CacheGeometry(512, 2))  # 4 sets
    with pytest.raises(ValueError):
        cache.install(mk(1), 0)
    cache.install(mk(1), 3)
    assert cache.peek(1).slot == 3
    with pytest.raises(ValueError):
        cache.install(mk(5), 3)


def test_touched_tracks_slot_changes():
    cache = MetadataCache(CacheGeometry(512, 2))
    line = cache.fill(mk(2)) or cache.peek(2)
    assert cache.touched == {line.slot}
    cache.touched.clear()
    cache.touch(line)
    assert cache.touched == {line.slot}
    cache.touched.clear()
    cache.remove(2)
    assert cache.touched == {line.slot} and 2 not in cache


def test_state_and_clone():
    line = mk(3, dirty=True)
    line.writes_since_persist[2] = 1
    cp = line.clone()
    assert cp.state() == line.state()
    cp.writes_since_persist[2] = 2
    cp.node.counters[0] = 9
    assert cp.state() != line.state() and line.node.counters[0] == 0


def test_snapshots_copy_lines():
    cache = MetadataCache(CacheGeometry(512, 2))
    cache.fill(mk(0, dirty=True))
    cache.fill(mk(1))
    assert [l.addr for l in cache.snapshot_dirty()] == [0]
    snap = cache.snapshot()
    snap[0].dirty = False
    assert cache.peek(0).dirty
