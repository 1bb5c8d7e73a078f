import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvmstep.crypto.aes import ENC_TABLES, aes128_expand_key, ttable_encrypt
from cvmstep.crypto.xts import XtsCipher, mul_alpha, plain64_iv
from cvmstep.fixture import DiskFixture, make_fixture
from cvmstep.guest import Op
from cvmstep.victim import (
    KernelLayout,
    LayoutError,
    XtsRequest,
    compile_xts_requests,
    function_manifest,
)


def test_fips_appendix_b_example():
    key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
    ct, _ = ttable_encrypt(bytes.fromhex("3243f6a8885a308d313198a2e0370734"), aes128_expand_key(key))
    assert ct.hex() == "3925841d02dc09fbdc118597196a0b32"


@settings(max_examples=30, deadline=None)
@given(st.binary(min_size=16, max_size=16))
def test_plaintext_equal_to_key_zeroes_round1(key):
    s = aes128_expand_key(key)
    assert s.round_keys[0] == key
    _, script = ttable_encrypt(key, s)
    assert all(lk.index == 0 for lk in script.round(1))


def test_mul_alpha_examples():
    assert mul_alpha(bytes(16)) == bytes(16)
    assert mul_alpha(b"\x01" + bytes(15)) == b"\x02" + bytes(15)


def test_tweak_chain():
    x = XtsCipher(bytes(range(32)))
    t = x.initial_tweak(9)
    data = bytes(64)
    ct = x.encrypt(data, 9)
    for j in range(4):
        enc = ttable_encrypt(t, x.data_sched, record=False)[0]  # E(0 ^ t) ^ t
        assert ct[16 * j:16 * j + 16] == bytes(a ^ b for a, b in zip(enc, t))
        t = mul_alpha(t)


def test_sector_zero_tweak_encrypts_zero_block():
    x = XtsCipher(bytes(range(32)))
    assert plain64_iv(0) == bytes(16)
    assert x.initial_tweak(0) == ttable_encrypt(bytes(16), x.tweak_sched, record=False)[0]


def _compile(n=2, fenced=False, seed=0):
    rng = np.random.default_rng(seed)
    layout = KernelLayout.random(rng)
    cipher = XtsCipher(rng.bytes(32))
    reqs = [XtsRequest(int(s), rng.bytes(16)) for s in rng.integers(0, 1 << 30, n)]
    return compile_xts_requests(reqs, cipher, layout, fenced=fenced), reqs, cipher


def test_loads_touch_table_base_plus_index():
    vp, _, _ = _compile()
    for idx, t in vp.truth.items():
        ins = vp.program.instructions[idx]
        assert ins.op is Op.LOAD and ins.table == t.table
        assert ins.mem == (vp.layout.tables[t.table] + 4 * t.index,)


def test_compiled_plaintexts_match_xts():
    vp, reqs, cipher = _compile(3)
    for r, pt in zip(reqs, vp.plaintexts):
        assert cipher.decrypt(r.ciphertext, r.sector) == pt


def test_function_lengths_match_manifest():
    for fenced in (False, True):
        vp, _, _ = _compile(2, fenced)
        starts = vp.function_starts
        for direction in ("encrypt", "decrypt"):
            m = function_manifest(direction, fenced)
            for _, d, first in starts:
                if d != direction:
                    continue
                got = {i - first for i in vp.truth if first <= i < first + m.length}
                assert got == {a.ordinal for a in m.accesses}
        assert any(i.op is Op.FENCE for i in vp.program.instructions) == fenced


def test_round1_line_from_high_nibble():
    layout = KernelLayout.random(np.random.default_rng(0))
    for k in range(0x30, 0x40):
        s = aes128_expand_key(bytes([k]) + bytes(15))
        _, script = ttable_encrypt(bytes(16), s)
        lk = script.round(1)[0]
        addr = layout.tables[lk.table] + 4 * lk.index
        assert (addr - layout.tables[lk.table]) // 64 == 3


def test_tables_are_aligned_and_16_lines():
    layout = KernelLayout.random(np.random.default_rng(1))
    bases = sorted(layout.tables[t] for t in ENC_TABLES)
    assert all(b % 64 == 0 for b in bases)
    assert [b2 - b1 for b1, b2 in zip(bases, bases[1:])] == [1024] * 3


def test_table_code_collision_is_rejected():
    layout = KernelLayout(0x1000, 0x1000, {})
    with pytest.raises(LayoutError):
        layout._place_tables()


def test_fixture_round_trip(tmp_path):
    fx = make_fixture(3, sectors=5, known=2)
    assert len(fx.known) == 2 and len({s.sector for s in fx.sectors}) == 5
    x = XtsCipher(fx.key)
    for s in fx.sectors:
        if s.plaintext is not None:
            assert x.decrypt(s.ciphertext, s.sector) == s.plaintext
    path = tmp_path / "fx.json"
    fx.save(path)
    assert DiskFixture.load(path) == fx


def test_fixture_validation():
    with pytest.raises(ValueError):
        make_fixture(0, sectors=2, known=3)
    with pytest.raises(ValueError):
        DiskFixture.from_json('{"version": 2}')
