"""End-to-end AES-XTS attack: profile classifiers, trace the victim, recover both keys."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attack import NoiseProfile, collect_cipher_traces, collect_xts_traces
from .cache import CacheGeometry
from .classifier import MlpModel, TrainConfig, accuracy, build_dataset, split_by_op, train
from .crypto.xts import XtsCipher
from .fixture import DiskFixture
from .guest import TimingConfig
from .keyrecovery import (
    KeyRecoveryError,
    RecoveredKeys,
    SearchConfig,
    measurements_from_traces,
    recover_xts_keys,
)
from .stepper import StepperKnobs
from .victim import XtsRequest


@dataclass
class ProfileResult:
    direction: str
    models: dict[str, MlpModel]
    accuracy: dict[str, float]
    train_size: dict[str, int]
    test_size: dict[str, int]


def train_profile(direction: str, n_ops: int, rng: np.random.Generator, noise: Optional[NoiseProfile] = None,
                  knobs: Optional[StepperKnobs] = None, cfg: Optional[TrainConfig] = None,
                  test_fraction: float = 0.155, geometry: Optional[CacheGeometry] = None,
                  timing: Optional[TimingConfig] = None) -> ProfileResult:
    """Profile the cipher under an attacker-chosen key and fit one classifier per table."""
    traces, _, _ = collect_cipher_traces(n_ops, rng, direction, knobs, noise, geometry=geometry, timing=timing)
    models, acc, ntr, nte = {}, {}, {}, {}
    for name, ct in traces.items():
        ds = build_dataset(ct.hot, ct.labels)
        tr, te = split_by_op(ds, test_fraction, rng)
        model, _ = train(tr.x, tr.y, cfg)
        models[name] = model
        acc[name] = accuracy(model, te.x, te.y)
        ntr[name], nte[name] = len(tr.y), len(te.y)
    return ProfileResult(direction, models, acc, ntr, nte)


@dataclass
class AttackReport:
    keys: Optional[RecoveredKeys]
    success: bool
    profile_accuracy: dict = field(default_factory=dict)
    trace_stats: dict = field(default_factory=dict)
    measurement_stats: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: Optional[str] = None

    def summary(self) -> dict:
        return {
            "success": self.success,
            "tweak_key": self.keys.tweak_key.hex() if self.keys and self.keys.tweak_key else None,
            "data_key": self.keys.data_key.hex() if self.keys and self.keys.data_key else None,
            "search": self.keys.stats if self.keys else None,
            "profile_accuracy": self.profile_accuracy,
            "trace_stats": self.trace_stats,
            "measurement_stats": self.measurement_stats,
            "timings": self.timings,
            "error": self.error,
        }


def run_xts_attack(fixture: DiskFixture, rng: np.random.Generator, noise: Optional[NoiseProfile] = None,
                   knobs: Optional[StepperKnobs] = None, profile_ops: int = 400,
                   train_cfg: Optional[TrainConfig] = None, search: Optional[SearchConfig] = None,
                   mass: float = 0.95, interlude: int = 2, geometry: Optional[CacheGeometry] = None,
                   timing: Optional[TimingConfig] = None, all_payload_ops: bool = False) -> AttackReport:
    """Traces the guest reading every fixture sector and recovers the XTS keys.

    The fixture key only drives the simulated victim; the attacker side
    sees sector numbers, ciphertexts and the known plaintexts.
    """
    noise = noise or NoiseProfile()
    search = search or SearchConfig()
    rounds = range(1, search.depth + 1)
    t0 = time.perf_counter()
    profiles = {d: train_profile(d, profile_ops, rng, noise, knobs, train_cfg, geometry=geometry, timing=timing)
                for d in ("encrypt", "decrypt")}
    t1 = time.perf_counter()
    requests = [XtsRequest(s.sector, s.ciphertext[:16]) for s in fixture.sectors]
    traces, _ = collect_xts_traces(requests, XtsCipher(fixture.key), rng, knobs, noise, interlude=interlude,
                                   geometry=geometry, timing=timing)
    t2 = time.perf_counter()
    n = len(requests)
    enc, enc_stats = measurements_from_traces(traces.measurements, "encrypt", profiles["encrypt"].models, n, mass, rounds)
    dec, dec_stats = measurements_from_traces(traces.measurements, "decrypt", profiles["decrypt"].models, n, mass, rounds)
    report = AttackReport(None, False,
                          {d: p.accuracy for d, p in profiles.items()},
                          traces.stats,
                          {"encrypt": {**enc_stats, "measurements": len(enc)},
                           "decrypt": {**dec_stats, "measurements": len(dec)}})
    try:
        keys = recover_xts_keys(enc, dec, [s.sector for s in fixture.sectors],
                                [s.ciphertext for s in fixture.sectors],
                                [s.plaintext for s in fixture.sectors], search, all_payload_ops)
        report.keys = keys
        report.success = True
    except KeyRecoveryError as exc:
        report.error = str(exc)
        report.keys = getattr(exc, "partial", None)
    t3 = time.perf_counter()
    report.timings = {"profile": round(t1 - t0, 3), "trace": round(t2 - t1, 3), "search": round(t3 - t2, 3)}
    return report
