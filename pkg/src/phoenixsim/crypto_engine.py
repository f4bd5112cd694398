"""Keyed primitives for the secure memory controller.

Everything here is a pure function of its inputs. The PRF is keyed BLAKE2b,
which stands in for the AES pad generator and the MAC unit of a real engine:
the simulator cares about recovery semantics, not cipher strength.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence, Tuple

COUNTER_BITS = 56
COUNTER_MAX = (1 << COUNTER_BITS) - 1
LINE_BYTES = 64
ECC_BYTES = 8
MAC_BITS = 64


def derive_key(seed: int) -> bytes:
    """128-bit processor key derived deterministically from an integer seed."""
    return hashlib.blake2b(seed.to_bytes(16, "little", signed=True), digest_size=16,
                           person=b"phnx-key").digest()


def _addr_bytes(addr) -> bytes:
    # LineAddr or (region, index) or bare int (treated as a data line)
    if isinstance(addr, int):
        region, index = 0, addr
    else:
        region, index = int(addr[0]), int(addr[1])
    return bytes((region,)) + index.to_bytes(7, "little")


def gen_pad(key: bytes, addr, counter: int) -> bytes:
    """64-byte one-time pad for (address, counter)."""
    msg = _addr_bytes(addr) + counter.to_bytes(8, "little")
    return hashlib.blake2b(msg, key=key, digest_size=64, person=b"phnx-pad").digest()


def _ecc_pad(key: bytes, addr, counter: int) -> bytes:
    msg = _addr_bytes(addr) + counter.to_bytes(8, "little")
    return hashlib.blake2b(msg, key=key, digest_size=ECC_BYTES, person=b"phnx-eccp").digest()


def _ecc_symbol(key: bytes, plain: bytes) -> bytes:
    return hashlib.blake2b(plain, key=key, digest_size=ECC_BYTES, person=b"phnx-ecc").digest()


def _xor(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(n, "little")


@dataclass(frozen=True)
class EccBlock:
    payload: bytes  # 64-byte ciphertext
    ecc: bytes      # 8-byte check symbol, stored encrypted alongside the line


def encrypt(plain: bytes, key: bytes, addr, counter: int) -> EccBlock:
    if len(plain) != LINE_BYTES:
        raise ValueError("plaintext must be exactly 64 bytes")
    payload = _xor(plain, gen_pad(key, addr, counter))
    ecc = _xor(_ecc_symbol(key, plain), _ecc_pad(key, addr, counter))
    return EccBlock(payload, ecc)


def decrypt(block: EccBlock, key: bytes, addr, counter: int) -> Tuple[bytes, bool]:
    """Return (plaintext, ecc_ok). A wrong counter yields garbage and ecc_ok=False."""
    plain = _xor(block.payload, gen_pad(key, addr, counter))
    expected = _xor(_ecc_symbol(key, plain), _ecc_pad(key, addr, counter))
    return plain, expected == block.ecc


def node_mac(counters: Sequence[int], parent_counter: int, addr, key: bytes) -> int:
    """64-bit tag over eight counters, the parent counter, and the node address."""
    msg = b"".join(c.to_bytes(7, "little") for c in counters)
    msg += parent_counter.to_bytes(7, "little") + _addr_bytes(addr)
    tag = hashlib.blake2b(msg, key=key, digest_size=8, person=b"phnx-mac").digest()
    return int.from_bytes(tag, "little")


class CryptoEngine:
    """Binds the key so callers inside the controller don't pass it around."""

    def __init__(self, key: bytes):
        if len(key) < 16:
            raise ValueError("key must be at least 128 bits")
        self.key = key

    @classmethod
    def from_seed(cls, seed: int) -> "CryptoEngine":
        return cls(derive_key(seed))

    def gen_pad(self, addr, counter: int) -> bytes:
        return gen_pad(self.key, addr, counter)

    def encrypt(self, plain: bytes, addr, counter: int) -> EccBlock:
        return encrypt(plain, self.key, addr, counter)

    def decrypt(self, block: EccBlock, addr, counter: int) -> Tuple[bytes, bool]:
        return decrypt(block, self.key, addr, counter)

    def node_mac(self, counters: Sequence[int], parent_counter: int, addr) -> int:
        return node_mac(counters, parent_counter, addr, self.key)
