import numpy as np
import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from hypothesis import given, settings
from hypothesis import strategies as st

from cvmstep.crypto.aes import (
    aes128_expand_key,
    decrypt_block,
    encrypt_block,
    master_key_from_last_round_key,
    ttable_decrypt,
    ttable_encrypt,
    uninvert_round_keys,
)
from cvmstep.crypto.xts import XtsCipher, mul_alpha, plain64_iv

FIPS_KEY = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
FIPS_PT = bytes.fromhex("00112233445566778899aabbccddeeff")
FIPS_CT = bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a")


def ref_ecb(key, block, decrypt=False):
    c = Cipher(algorithms.AES(key), modes.ECB())
    op = c.decryptor() if decrypt else c.encryptor()
    return op.update(block) + op.finalize()


def ref_xts(key, data, sector, decrypt=False):
    c = Cipher(algorithms.AES(key), modes.XTS(plain64_iv(sector)))
    op = c.decryptor() if decrypt else c.encryptor()
    return op.update(data) + op.finalize()


def test_fips197_example():
    assert encrypt_block(FIPS_PT, FIPS_KEY) == FIPS_CT
    assert decrypt_block(FIPS_CT, FIPS_KEY) == FIPS_PT


def test_fips197_key_expansion():
    # key-expansion example with the 2b7e1516... key
    s = aes128_expand_key(bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c"))
    assert s.round_keys[10] == bytes.fromhex("d014f9a8c9ee2589e13f0cc8b6630ca6")


def test_random_vectors_against_reference():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        key, blk = rng.bytes(16), rng.bytes(16)
        ct = encrypt_block(blk, key)
        assert ct == ref_ecb(key, blk)
        assert decrypt_block(ct, key) == blk
        assert decrypt_block(blk, key) == ref_ecb(key, blk, decrypt=True)


def test_xts_random_vectors_against_reference():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        key = rng.bytes(32)
        if key[:16] == key[16:]:
            continue
        sector = int(rng.integers(0, 1 << 40))
        nblocks = int(rng.integers(1, 5))
        data = rng.bytes(16 * nblocks)
        x = XtsCipher(key)
        ct = x.encrypt(data, sector)
        assert ct == ref_xts(key, data, sector)
        assert x.decrypt(ct, sector) == data


def test_xts_full_sector_round_trip():
    rng = np.random.default_rng(2)
    key = rng.bytes(32)
    data = rng.bytes(512)
    x = XtsCipher(key)
    assert x.decrypt(x.encrypt(data, 7), 7) == data
    assert x.encrypt(data, 7) == ref_xts(key, data, 7)


def test_access_script_covers_every_lookup():
    _, script = ttable_encrypt(FIPS_PT, aes128_expand_key(FIPS_KEY))
    assert len(script) == 160
    assert [len(script.round(r)) for r in range(1, 11)] == [16] * 10
    # round-1 indices are plaintext xor key
    idx = {lk.position: lk.index for lk in script.round(1)}
    assert all(idx[p] == FIPS_PT[p] ^ FIPS_KEY[p] for p in range(16))


def test_decrypt_script_round1_uses_last_round_key():
    sched = aes128_expand_key(FIPS_KEY)
    _, script = ttable_decrypt(FIPS_CT, sched)
    idx = {lk.position: lk.index for lk in script.round(1)}
    assert all(idx[p] == FIPS_CT[p] ^ sched.round_keys[10][p] for p in range(16))


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=16, max_size=16))
def test_inverse_key_schedule(key):
    s = aes128_expand_key(key)
    assert master_key_from_last_round_key(s.round_keys[10]) == key
    assert uninvert_round_keys(s.inverse_round_keys) == s.round_keys


def test_mul_alpha_carry():
    t = bytes(15) + b"\x80"
    assert mul_alpha(t) == b"\x87" + bytes(15)


def test_plain64_iv_layout():
    assert plain64_iv(0x0102) == b"\x02\x01" + bytes(14)


def test_bad_lengths():
    with pytest.raises(ValueError):
        aes128_expand_key(bytes(15))
    with pytest.raises(ValueError):
        XtsCipher(bytes(16))
    with pytest.raises(ValueError):
        XtsCipher(bytes(32)).encrypt(bytes(15), 0)
