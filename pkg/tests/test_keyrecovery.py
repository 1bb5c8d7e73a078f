import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvmstep.crypto.aes import aes128_expand_key, ttable_decrypt, ttable_encrypt
from cvmstep.crypto.xts import XtsCipher, plain64_iv
from cvmstep.fixture import make_fixture
from cvmstep.keyrecovery import (
    AmbiguousKey,
    KeyRecoveryError,
    Measurement,
    NoSurvivingKey,
    PhaseError,
    agreement,
    agreement_batch,
    extract_candidates,
    filter_measurements,
    measurements_from_truth,
    recover_single_key,
    recover_xts_keys,
    round_keys,
    search_keys,
)

FN = {"encrypt": ttable_encrypt, "decrypt": ttable_decrypt}


def traced(direction, n, seed):
    rng = np.random.default_rng(seed)
    key = rng.bytes(16)
    sched = aes128_expand_key(key)
    ins = [rng.bytes(16) for _ in range(n)]
    outs = [FN[direction](b, sched) for b in ins]
    return key, ins, [o[0] for o in outs], [o[1] for o in outs]


def test_extract_candidates_examples():
    assert extract_candidates([3], 0) == set(range(0x30, 0x40))
    assert extract_candidates([3], 0xFF) == set(range(0xC0, 0xD0))
    assert extract_candidates([0, 1], 0x10) == set(range(0x00, 0x20))
    assert extract_candidates([], 7) == set()


def test_measurement_needs_candidates():
    with pytest.raises(ValueError):
        Measurement(0, 1, 0, 0, ())
    m = Measurement(0, 1, 0, 0, (1, 4))
    assert m.mask == 0b10010


def test_filter_drops_wide_measurements():
    ms = [Measurement(0, 1, 0, 0, tuple(range(k))) for k in (1, 7, 8, 16)]
    kept, dropped = filter_measurements(ms)
    assert len(kept) == 2 and dropped == 2


@pytest.mark.parametrize("direction", ["encrypt", "decrypt"])
def test_round_keys_match_expansion(direction):
    rng = np.random.default_rng(0)
    keys = [rng.bytes(16) for _ in range(5)]
    scheds = [aes128_expand_key(k) for k in keys]
    attr = "round_keys" if direction == "encrypt" else "inverse_round_keys"
    first = np.array([list(getattr(s, attr)[0]) for s in scheds], dtype=np.uint8)
    got = round_keys(direction, first)
    for s, rk in zip(scheds, got):
        assert [bytes(r) for r in rk] == list(getattr(s, attr))


@pytest.mark.parametrize("direction", ["encrypt", "decrypt"])
def test_noise_free_recovery(direction):
    key, ins, outs, scripts = traced(direction, 6, 1)
    ms = measurements_from_truth(scripts, direction)
    r = recover_single_key(ms, ins, direction, verify=[(ins[0], outs[0])])
    assert r.key == key and r.stats.verified


def test_round1_only_leaves_low_nibbles_open():
    _, ins, _, scripts = traced("encrypt", 6, 2)
    with pytest.raises(AmbiguousKey) as exc:
        search_keys(measurements_from_truth(scripts, "encrypt", rounds=(1,)), ins, "encrypt")
    assert exc.value.residual == [16] * 16


def test_unknown_direction_and_empty_measurements():
    with pytest.raises(ValueError):
        search_keys([Measurement(0, 1, 0, 0, (1,))], [bytes(16)], "sideways")
    with pytest.raises(KeyRecoveryError):
        search_keys([], [bytes(16)], "encrypt")


@pytest.mark.parametrize("direction", ["encrypt", "decrypt"])
def test_agreement_batch_matches_scalar(direction):
    key, ins, _, scripts = traced(direction, 5, 3)
    rng = np.random.default_rng(4)
    ms = measurements_from_truth(scripts, direction, rounds=range(1, 10),
                                 extra=lambda op, line: list(rng.integers(0, 16, 2)))
    others = [rng.bytes(16) for _ in range(6)] + [key]
    attr = "round_keys" if direction == "encrypt" else "inverse_round_keys"
    first = np.array([list(getattr(aes128_expand_key(k), attr)[0]) for k in others], dtype=np.uint8)
    inputs = np.array([list(b) for b in ins], dtype=np.uint8)
    batch = agreement_batch(direction, first, inputs, ms, 9)
    for k, a in zip(others, batch):
        assert a == pytest.approx(agreement(direction, k, ins, ms, 9))
    assert batch[-1] == 1.0 and batch[:-1].max() < 1.0


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["encrypt", "decrypt"]))
def test_true_key_survives_when_every_candidate_set_holds_the_truth(seed, direction):
    key, ins, _, scripts = traced(direction, 10, seed)
    rng = np.random.default_rng(seed)
    ms = measurements_from_truth(scripts, direction,
                                 extra=lambda op, line: list(rng.integers(0, 16, int(rng.integers(0, 4)))))
    cands, _ = search_keys(ms, ins, direction)
    assert key in [c.key for c in cands]


def test_reopen_recovers_a_misvoted_byte():
    key, ins, outs, scripts = traced("encrypt", 8, 5)
    ms = []
    for m in measurements_from_truth(scripts, "encrypt"):
        if m.round == 1 and m.position == 5 and m.op > 0:
            # most round-1 lines of one byte agree on the wrong high nibble
            wrong = (ins[m.op][5] ^ (key[5] ^ 0x80)) >> 4
            m = Measurement(m.op, 1, m.table, 5, (wrong,))
        ms.append(m)
    r = recover_single_key(ms, ins, "encrypt", verify=[(ins[0], outs[0])])
    assert r.key == key and r.stats.reopened[-1] == 5


def test_no_surviving_key_without_verification_match():
    _, ins, outs, scripts = traced("encrypt", 6, 7)
    ms = measurements_from_truth(scripts, "encrypt")
    with pytest.raises(NoSurvivingKey):
        recover_single_key(ms, ins, "encrypt", verify=[(ins[0], bytes(16))])


def _xts_measurements(fx):
    cipher = XtsCipher(fx.key)
    sectors = [s.sector for s in fx.sectors]
    enc = [ttable_encrypt(plain64_iv(s), cipher.tweak_sched)[1] for s in sectors]
    dec = []
    for rec in fx.sectors:
        t = cipher.initial_tweak(rec.sector)
        x = bytes(a ^ b for a, b in zip(rec.ciphertext[:16], t))
        dec.append(ttable_decrypt(x, cipher.data_sched)[1])
    rounds = range(1, 10)
    return (measurements_from_truth(enc, "encrypt", rounds), measurements_from_truth(dec, "decrypt", rounds), sectors,
            [s.ciphertext for s in fx.sectors], [s.plaintext for s in fx.sectors])


def test_xts_recovery_from_noise_free_traces():
    fx = make_fixture(11, sectors=8, known=6)
    got = recover_xts_keys(*_xts_measurements(fx))
    assert (got.tweak_key, got.data_key) == (fx.tweak_key, fx.data_key)
    assert got.stats["phase2"]["verified"]
    assert '"data_key"' in got.to_json()


def test_xts_without_known_plaintext_stops_in_phase2():
    fx = make_fixture(12, sectors=8, known=0)
    with pytest.raises(PhaseError) as exc:
        recover_xts_keys(*_xts_measurements(fx))
    assert exc.value.phase == 2
    assert exc.value.partial.tweak_key == fx.tweak_key and exc.value.partial.data_key is None
