"""XTS-AES-128 with the plain64 IV scheme (little-endian sector number)."""
from __future__ import annotations

from .aes import AesKeySchedule, aes128_expand_key, ttable_decrypt, ttable_encrypt

SECTOR_SIZE = 512
BLOCK = 16


def mul_alpha(tweak: bytes) -> bytes:
    """Multiply a tweak by x in GF(2^128), little-endian convention."""
    v = int.from_bytes(tweak, "little")
    carry = v >> 127
    v = ((v << 1) & ((1 << 128) - 1)) ^ (0x87 if carry else 0)
    return v.to_bytes(16, "little")


def plain64_iv(sector: int) -> bytes:
    return (sector & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little") + bytes(8)


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


class XtsCipher:
    """``key`` is 32 bytes: data key first, tweak key second."""

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ValueError("XTS-AES-128 key must be 32 bytes")
        self.data_key = bytes(key[:16])
        self.tweak_key = bytes(key[16:])
        self.data_sched: AesKeySchedule = aes128_expand_key(self.data_key)
        self.tweak_sched: AesKeySchedule = aes128_expand_key(self.tweak_key)

    def initial_tweak(self, sector: int) -> bytes:
        return ttable_encrypt(plain64_iv(sector), self.tweak_sched, record=False)[0]

    def _run(self, data: bytes, sector: int, decrypt: bool) -> bytes:
        if len(data) % BLOCK or not data:
            raise ValueError("data must be a non-empty multiple of 16 bytes")
        t = self.initial_tweak(sector)
        out = bytearray()
        op = ttable_decrypt if decrypt else ttable_encrypt
        for i in range(0, len(data), BLOCK):
            blk = _xor(data[i:i + BLOCK], t)
            out += _xor(op(blk, self.data_sched, record=False)[0], t)
            t = mul_alpha(t)
        return bytes(out)

    def encrypt(self, data: bytes, sector: int) -> bytes:
        return self._run(data, sector, False)

    def decrypt(self, data: bytes, sector: int) -> bytes:
        return self._run(data, sector, True)
