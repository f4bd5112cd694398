import math

import pytest
from hypothesis import given, strategies as st

from phoenixsim import SchemeKind, SecureMemory, format_image
from phoenixsim.crypto_engine import CryptoEngine
from phoenixsim.errors import ConfigError, MacMismatch
from phoenixsim.mem_model import LineAddr, Region
from phoenixsim.metadata_cache import CacheGeometry, MetadataCache
from phoenixsim.toc import (ARITY, ToCNode, TreeGeometry, TreeOfCounters, analytic_levels,
                            toc_addr, tree_levels)

from conftest import tiny


def levels_oracle(data_lines: int) -> int:
    # one level of leaves over the data, then 8-ary reduction to a single root
    return 1 + max(0, math.ceil(round(math.log(math.ceil(data_lines / 8), 8), 9)))


@pytest.mark.parametrize("size,levels", [(8 << 40, 13), (256 << 10, 4), (32 << 10, 3),
                                         (4 << 10, 2), (16 << 20, 6)])
def test_analytic_levels(size, levels):
    assert analytic_levels(size) == levels == levels_oracle(size // 64)


@given(st.integers(64, 1 << 20))
def test_levels_match_oracle(n):
    assert tree_levels(n) == levels_oracle(n)
    assert TreeGeometry(n).levels == tree_levels(n)


def test_tiny_geometry_rejected():
    with pytest.raises(ConfigError):
        TreeGeometry(63)


@given(st.integers(64, 20000).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))))
def test_geometry_indexing(args):
    n, d = args
    geo = TreeGeometry(n)
    leaf, slot = geo.leaf_of(d)
    assert geo.locate(leaf) == (0, d // 8) and slot == d % 8
    path = geo.path(leaf)
    assert len(path) == geo.levels - 1
    for lv, idx in enumerate(path):
        assert geo.locate(idx)[0] == lv
        assert geo.index_of(*geo.locate(idx)) == idx
    assert geo.parent_of(path[-1])[0] is None
    assert all(0 <= i < geo.toc_lines for i in path)


def test_node_pack_round_trip():
    node = ToCNode([1, 2, 3, (1 << 56) - 1, 0, 5, 6, 7], 0xDEADBEEF)
    raw = node.pack()
    assert len(raw) == 64 and ToCNode.unpack(raw) == node
    assert node.version == sum(node.counters)
    with pytest.raises(ValueError):
        ToCNode.unpack(b"short")


def _tree(config):
    img = format_image(config)
    geo = TreeGeometry(config.data_lines)
    cache = MetadataCache(CacheGeometry(config.cache_bytes, config.associativity))
    tree = TreeOfCounters(geo, CryptoEngine.from_seed(config.seed), cache, img.get,
                          img.registers.toc_root)
    return img, geo, tree


def test_formatted_tree_verifies_everywhere():
    img, geo, tree = _tree(tiny())
    for idx in range(geo.toc_lines):
        tree.verify_stored(idx)


def test_tampered_stored_node_raises_mac_mismatch():
    img, geo, tree = _tree(tiny())
    a = toc_addr(geo.level_offsets[1] + 3)
    raw = bytearray(img.get(a))
    raw[0] ^= 1
    img.put(a, bytes(raw))
    with pytest.raises(MacMismatch):
        tree.verify_stored(a.index)
    # every leaf below it fails too, on the fetch path
    child = geo.level_offsets[0] + 3 * 8
    with pytest.raises(MacMismatch):
        tree.get(child)


def test_strict_update_touches_every_level():
    for size, want in [(256 << 10, 4), (32 << 10, 3)]:
        cfg = tiny(SchemeKind.STRICT, memory_bytes=size)
        mem = SecureMemory(cfg)
        mem.write(5, bytes(64))
        updates = mem.tree.stats.node_updates_by_level
        assert sum(updates.values()) == want
        assert sorted(updates) == list(range(want))
        assert mem.events.strict_nodes == want - 1  # the root lives in a register


def test_lazy_update_is_cache_only():
    mem = SecureMemory(tiny(SchemeKind.WRITEBACK))
    mem.write(9, bytes(64))
    leaf, slot = mem.geometry.leaf_of(9)
    line = mem.cache.peek(leaf)
    assert line.dirty and line.node.counters[slot] == 1
    assert ToCNode.unpack(mem.image.get(toc_addr(leaf))).counters[slot] == 0


def quiescent_check(mem, writes):
    """Oracle for a flushed image: leaf counter = writes to the line, parent = sum of children."""
    geo = mem.geometry
    img = mem.image
    nodes = {i: ToCNode.unpack(img.get(toc_addr(i))) for i in range(geo.toc_lines)}
    for d in range(geo.data_lines):
        leaf, slot = geo.leaf_of(d)
        assert nodes[leaf].counters[slot] == writes.get(d, 0)
    for i, node in nodes.items():
        parent, slot = geo.parent_of(i)
        pv = mem.tree.root[slot] if parent is None else nodes[parent].counters[slot]
        assert pv == sum(node.counters)
        assert mem.tree.mac_of(i, node, pv) == node.mac
    assert img.registers.toc_root == tuple(mem.tree.root)


@pytest.mark.parametrize("kind", list(SchemeKind))
@given(st.lists(st.integers(0, 1023), min_size=1, max_size=60))
def test_flushed_tree_counts_writes(kind, addrs):
    mem = SecureMemory(tiny(kind))
    writes = {}
    for a in addrs:
        mem.write(a, a.to_bytes(2, "little") * 32)
        writes[a] = writes.get(a, 0) + 1
    mem.flush()
    assert len(mem.cache) == 0
    if kind is SchemeKind.PHOENIXPLUS:
        lagging_leaf_check(mem, writes)
    else:
        quiescent_check(mem, writes)


def lagging_leaf_check(mem, writes):
    """Phoenix+ never propagates leaves: stored leaves lag by < N, data ECC supplies the rest."""
    geo = mem.geometry
    n = mem.scheme.persistence_limit
    for i in range(geo.toc_lines):
        mem.tree.verify_stored(i)
    for d in range(geo.data_lines):
        leaf, slot = geo.leaf_of(d)
        stored = ToCNode.unpack(mem.image.get(toc_addr(leaf))).counters[slot]
        assert 0 <= writes.get(d, 0) - stored < n
        assert mem.true_counter(d) == writes.get(d, 0)
    for i in range(geo.level_offsets[1], geo.toc_lines):
        assert ToCNode.unpack(mem.image.get(toc_addr(i))).counters == [0] * ARITY


def test_parent_counter_binds_child():
    # a stored child with valid MAC under an old parent value fails after the parent moves
    mem = SecureMemory(tiny(SchemeKind.WRITEBACK))
    leaf, _ = mem.geometry.leaf_of(0)
    old = mem.image.get(toc_addr(leaf))
    mem.write(0, bytes(64))
    mem.flush()
    mem.image.put(toc_addr(leaf), old)
    with pytest.raises(MacMismatch):
        mem.tree.verify_stored(leaf)


def test_data_region_and_toc_sizes():
    cfg = tiny()
    img = format_image(cfg)
    geo = TreeGeometry(cfg.data_lines)
    assert img.capacities[Region.TOC] == geo.toc_lines
    assert img.capacities[Region.DATA] == cfg.data_lines
    assert img.get(LineAddr(Region.DATA, 0)) != bytes(64)  # zeros, encrypted
