"""Small eager hash tree over the per-slot cache mirror payloads.

Leaf ``i`` hashes slot ``i``'s payload (empty for a slot that holds nothing
worth recovering). Internal nodes are volatile; only the root is kept, in a
persistent register, so recovery rebuilds the tree from NVM and compares.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Dict, List, Tuple

ARITY = 8
DIGEST = 64


def _leaf(key: bytes, slot: int, payload: bytes) -> bytes:
    return hashlib.blake2b(slot.to_bytes(4, "little") + payload, key=key, digest_size=DIGEST,
                           person=b"phnx-cmlf").digest()


def _node(key: bytes, children: List[bytes]) -> bytes:
    return hashlib.blake2b(b"".join(children), key=key, digest_size=DIGEST,
                           person=b"phnx-cmnd").digest()


def tree_width(slots: int) -> int:
    width = ARITY
    while width < slots:
        width *= ARITY
    return width


@lru_cache(maxsize=16)
def _empty_levels(key: bytes, width: int) -> Tuple[Tuple[bytes, ...], ...]:
    levels = [tuple(_leaf(key, i, b"") for i in range(width))]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        levels.append(tuple(_node(key, list(prev[i:i + ARITY])) for i in range(0, len(prev), ARITY)))
    return tuple(levels)


class MirrorTree:
    def __init__(self, key: bytes, slots: int):
        self.key = key
        self.slots = slots
        self.width = tree_width(slots)
        self.levels: List[List[bytes]] = [list(lv) for lv in _empty_levels(key, self.width)]
        self.hashes = 0

    @property
    def depth(self) -> int:
        """Hash levels above the leaves."""
        return len(self.levels) - 1

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def set(self, slot: int, payload: bytes) -> None:
        if not 0 <= slot < self.slots:
            raise IndexError(slot)
        self.levels[0][slot] = _leaf(self.key, slot, payload)
        self.hashes += 1
        i = slot
        for lv in range(1, len(self.levels)):
            i //= ARITY
            below = self.levels[lv - 1]
            self.levels[lv][i] = _node(self.key, below[i * ARITY:(i + 1) * ARITY])
            self.hashes += 1

    @classmethod
    def build(cls, key: bytes, slots: int, payloads: Dict[int, bytes]) -> "MirrorTree":
        """Rebuild from scratch; ``payloads`` omits empty slots."""
        tree = cls(key, slots)
        for slot, payload in payloads.items():
            tree.levels[0][slot] = _leaf(key, slot, payload)
            tree.hashes += 1
        for lv in range(1, len(tree.levels)):
            below = tree.levels[lv - 1]
            tree.levels[lv] = [_node(key, below[i:i + ARITY]) for i in range(0, len(below), ARITY)]
            tree.hashes += len(tree.levels[lv])
        return tree


def empty_root(key: bytes, slots: int) -> bytes:
    return _empty_levels(key, tree_width(slots))[-1][0]
