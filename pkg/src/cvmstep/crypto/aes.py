"""T-table AES-128 in the style of the kernel's generic C implementation.

Every table lookup is recorded in an :class:`AccessScript` so that the same
arithmetic can be compiled into a guest program and attacked through the
cache.  Encryption uses four round tables ``enc0..enc3`` plus a dedicated
final-round table ``encf``; decryption mirrors that with the equivalent
inverse cipher (``dec0..dec3``, ``decf``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple


def _xtime(a: int) -> int:
    a <<= 1
    if a & 0x100:
        a ^= 0x11B
    return a & 0xFF


def gf_mul(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        a = _xtime(a)
        b >>= 1
    return r


def _build_sbox() -> tuple[list[int], list[int]]:
    # multiplicative inverse via generator 3, then the affine map
    exp = [0] * 255
    log = [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x = gf_mul(x, 3)
    sbox = [0] * 256
    for a in range(256):
        inv = 0 if a == 0 else exp[(255 - log[a]) % 255]
        s = inv
        for shift in range(1, 5):
            s ^= ((inv << shift) | (inv >> (8 - shift))) & 0xFF
        sbox[a] = s ^ 0x63
    inv_sbox = [0] * 256
    for a, s in enumerate(sbox):
        inv_sbox[s] = a
    return sbox, inv_sbox


SBOX, INV_SBOX = _build_sbox()


def _word(b0: int, b1: int, b2: int, b3: int) -> int:
    return (b0 << 24) | (b1 << 16) | (b2 << 8) | b3


def _ror8(w: int) -> int:
    return ((w >> 8) | (w << 24)) & 0xFFFFFFFF


def _build_tables():
    te0 = []
    td0 = []
    for x in range(256):
        s = SBOX[x]
        te0.append(_word(gf_mul(s, 2), s, s, gf_mul(s, 3)))
        i = INV_SBOX[x]
        td0.append(_word(gf_mul(i, 14), gf_mul(i, 9), gf_mul(i, 13), gf_mul(i, 11)))
    te = [te0]
    td = [td0]
    for _ in range(3):
        te.append([_ror8(w) for w in te[-1]])
        td.append([_ror8(w) for w in td[-1]])
    tef = [_word(s, s, s, s) for s in SBOX]
    tdf = [_word(s, s, s, s) for s in INV_SBOX]
    return te, td, tef, tdf


TE, TD, TE_FINAL, TD_FINAL = _build_tables()

ENC_TABLES = ("enc0", "enc1", "enc2", "enc3")
DEC_TABLES = ("dec0", "dec1", "dec2", "dec3")
ENC_FINAL = "encf"
DEC_FINAL = "decf"

TABLE_CONTENTS: dict[str, list[int]] = {
    **{name: TE[i] for i, name in enumerate(ENC_TABLES)},
    **{name: TD[i] for i, name in enumerate(DEC_TABLES)},
    ENC_FINAL: TE_FINAL,
    DEC_FINAL: TD_FINAL,
}

RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)

# state byte read by table t of output column c (ShiftRows folded in)
ENC_POSITIONS = tuple(tuple(4 * ((c + t) % 4) + t for t in range(4)) for c in range(4))
DEC_POSITIONS = tuple(tuple(4 * ((c - t) % 4) + t for t in range(4)) for c in range(4))


class Lookup(NamedTuple):
    round: int
    table: str
    position: int
    index: int


@dataclass
class AccessScript:
    """Ordered table lookups of one block operation."""

    lookups: list[Lookup] = field(default_factory=list)

    def add(self, rnd: int, table: str, position: int, index: int) -> None:
        self.lookups.append(Lookup(rnd, table, position, index))

    def __len__(self) -> int:
        return len(self.lookups)

    def __iter__(self):
        return iter(self.lookups)

    def for_table(self, table: str) -> list[Lookup]:
        return [lk for lk in self.lookups if lk.table == table]

    def round(self, rnd: int) -> list[Lookup]:
        return [lk for lk in self.lookups if lk.round == rnd]


def _sub_word(w: int) -> int:
    return _word(SBOX[w >> 24], SBOX[(w >> 16) & 0xFF], SBOX[(w >> 8) & 0xFF], SBOX[w & 0xFF])


def _rot_word(w: int) -> int:
    return ((w << 8) | (w >> 24)) & 0xFFFFFFFF


def _words(block: bytes) -> list[int]:
    return [int.from_bytes(block[4 * i:4 * i + 4], "big") for i in range(len(block) // 4)]


def _bytes(words) -> bytes:
    return b"".join(w.to_bytes(4, "big") for w in words)


def inv_mix_column_word(w: int) -> int:
    b = w.to_bytes(4, "big")
    out = []
    for r in range(4):
        coeffs = (14, 11, 13, 9)
        out.append(
            gf_mul(b[0], coeffs[(0 - r) % 4])
            ^ gf_mul(b[1], coeffs[(1 - r) % 4])
            ^ gf_mul(b[2], coeffs[(2 - r) % 4])
            ^ gf_mul(b[3], coeffs[(3 - r) % 4])
        )
    return _word(*out)


def mix_column_word(w: int) -> int:
    b = w.to_bytes(4, "big")
    out = []
    for r in range(4):
        coeffs = (2, 3, 1, 1)
        out.append(
            gf_mul(b[0], coeffs[(0 - r) % 4])
            ^ gf_mul(b[1], coeffs[(1 - r) % 4])
            ^ gf_mul(b[2], coeffs[(2 - r) % 4])
            ^ gf_mul(b[3], coeffs[(3 - r) % 4])
        )
    return _word(*out)


@dataclass(frozen=True)
class AesKeySchedule:
    round_keys: tuple[bytes, ...]
    inverse_round_keys: tuple[bytes, ...]

    @property
    def key(self) -> bytes:
        return self.round_keys[0]


def _expand_words(key: bytes) -> list[int]:
    w = _words(key)
    for i in range(4, 44):
        t = w[i - 1]
        if i % 4 == 0:
            t = _sub_word(_rot_word(t)) ^ (RCON[i // 4 - 1] << 24)
        w.append(w[i - 4] ^ t)
    return w


def invert_round_keys(round_keys) -> tuple[bytes, ...]:
    """Encryption round keys -> equivalent-inverse-cipher round keys."""
    rk = list(round_keys)
    out = [rk[10]]
    for i in range(1, 10):
        out.append(_bytes(inv_mix_column_word(w) for w in _words(rk[10 - i])))
    out.append(rk[0])
    return tuple(out)


def uninvert_round_keys(inverse_round_keys) -> tuple[bytes, ...]:
    dk = list(inverse_round_keys)
    out = [dk[10]]
    for i in range(1, 10):
        out.append(_bytes(mix_column_word(w) for w in _words(dk[10 - i])))
    out.append(dk[0])
    return tuple(out)


def aes128_expand_key(key: bytes) -> AesKeySchedule:
    if len(key) != 16:
        raise ValueError("AES-128 key must be 16 bytes")
    w = _expand_words(bytes(key))
    rks = tuple(_bytes(w[4 * r:4 * r + 4]) for r in range(11))
    return AesKeySchedule(rks, invert_round_keys(rks))


def master_key_from_last_round_key(rk10: bytes) -> bytes:
    """Run the key schedule backwards from round key 10 to the cipher key."""
    w = [0] * 44
    w[40:44] = _words(rk10)
    for i in range(43, 3, -1):
        t = w[i - 1]
        if i % 4 == 0:
            t = _sub_word(_rot_word(t)) ^ (RCON[i // 4 - 1] << 24)
        w[i - 4] = w[i] ^ t
    return _bytes(w[:4])


def _enc_round(s, rk_words, rnd, script, tables, positions, table_names):
    out = []
    for c in range(4):
        acc = rk_words[c]
        for t in range(4):
            pos = positions[c][t]
            idx = (s[pos // 4] >> (24 - 8 * (pos % 4))) & 0xFF
            if script is not None:
                script.add(rnd, table_names[t], pos, idx)
            acc ^= tables[t][idx]
        out.append(acc)
    return out


def _final_round(s, rk_words, rnd, script, table, table_name, positions):
    out = []
    for c in range(4):
        acc = 0
        for t in range(4):
            pos = positions[c][t]
            idx = (s[pos // 4] >> (24 - 8 * (pos % 4))) & 0xFF
            if script is not None:
                script.add(rnd, table_name, pos, idx)
            acc |= table[idx] & (0xFF000000 >> (8 * t))
        out.append(acc ^ rk_words[c])
    return out


def ttable_encrypt(block: bytes, schedule: AesKeySchedule, *, record: bool = True):
    """Encrypt one block; returns ``(ciphertext, script)`` (script is None if not recorded)."""
    if len(block) != 16:
        raise ValueError("block must be 16 bytes")
    script = AccessScript() if record else None
    rks = [_words(k) for k in schedule.round_keys]
    s = [a ^ b for a, b in zip(_words(block), rks[0])]
    for rnd in range(1, 10):
        s = _enc_round(s, rks[rnd], rnd, script, TE, ENC_POSITIONS, ENC_TABLES)
    s = _final_round(s, rks[10], 10, script, TE_FINAL, ENC_FINAL, ENC_POSITIONS)
    return _bytes(s), script


def ttable_decrypt(block: bytes, schedule: AesKeySchedule, *, record: bool = True):
    if len(block) != 16:
        raise ValueError("block must be 16 bytes")
    script = AccessScript() if record else None
    dks = [_words(k) for k in schedule.inverse_round_keys]
    s = [a ^ b for a, b in zip(_words(block), dks[0])]
    for rnd in range(1, 10):
        s = _enc_round(s, dks[rnd], rnd, script, TD, DEC_POSITIONS, DEC_TABLES)
    s = _final_round(s, dks[10], 10, script, TD_FINAL, DEC_FINAL, DEC_POSITIONS)
    return _bytes(s), script


def encrypt_block(block: bytes, key: bytes) -> bytes:
    return ttable_encrypt(block, aes128_expand_key(key), record=False)[0]


def decrypt_block(block: bytes, key: bytes) -> bytes:
    return ttable_decrypt(block, aes128_expand_key(key), record=False)[0]
