import hashlib

from hypothesis import given, strategies as st

from phoenixsim.mirror import ARITY, MirrorTree, empty_root, tree_width

KEY = b"k" * 16

updates = st.lists(st.tuples(st.integers(0, 99), st.binary(max_size=80)), max_size=40)


def naive_root(key, slots, payloads):
    """Independent recursive construction over the padded leaf row."""
    width = tree_width(slots)

    def leaf(i):
        return hashlib.blake2b(i.to_bytes(4, "little") + payloads.get(i, b""), key=key,
                               digest_size=64, person=b"phnx-cmlf").digest()

    def node(lo, span):
        if span == 1:
            return leaf(lo)
        step = span // ARITY
        kids = b"".join(node(lo + k * step, step) for k in range(ARITY))
        return hashlib.blake2b(kids, key=key, digest_size=64, person=b"phnx-cmnd").digest()

    return node(0, width)


def test_width_and_depth():
    assert tree_width(1) == 8 and tree_width(8) == 8 and tree_width(9) == 64
    assert tree_width(4096) == 4096 and MirrorTree(KEY, 4096).depth == 4


@given(updates)
def test_incremental_equals_rebuild_and_oracle(ups):
    tree = MirrorTree(KEY, 100)
    state = {}
    for slot, payload in ups:
        tree.set(slot, payload)
        state[slot] = payload
    nonempty = {s: p for s, p in state.items() if p}
    assert tree.root == MirrorTree.build(KEY, 100, nonempty).root
    assert tree.root == naive_root(KEY, 100, state)


def test_empty_root_matches_build():
    assert empty_root(KEY, 100) == MirrorTree(KEY, 100).root == MirrorTree.build(KEY, 100, {}).root
    assert empty_root(KEY, 100) != empty_root(b"x" * 16, 100)


@given(st.integers(0, 63), st.binary(min_size=1, max_size=16), st.integers(0, 127))
def test_any_change_moves_root(slot, payload, bit):
    tree = MirrorTree(KEY, 64)
    tree.set(slot, payload)
    before = tree.root
    b = bytearray(payload)
    b[(bit // 8) % len(b)] ^= 1 << bit % 8
    tree.set(slot, bytes(b))
    assert tree.root != before


def test_slot_position_matters():
    a, b = MirrorTree(KEY, 64), MirrorTree(KEY, 64)
    a.set(1, b"x")
    b.set(2, b"x")
    assert a.root != b.root


def test_hash_counting():
    tree = MirrorTree(KEY, 64)
    tree.set(0, b"x")
    assert tree.hashes == 1 + tree.depth
    assert MirrorTree.build(KEY, 64, {0: b"x"}).hashes == 1 + 8 + 1
