"""Encrypted-disk fixture: random XTS key, ciphertext sectors, known-plaintext subset."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .crypto.xts import SECTOR_SIZE, XtsCipher


@dataclass(frozen=True)
class SectorRecord:
    sector: int
    ciphertext: bytes
    plaintext: Optional[bytes] = None  # present for known-plaintext sectors


@dataclass(frozen=True)
class DiskFixture:
    key: bytes  # 32 bytes, data key then tweak key
    sectors: tuple[SectorRecord, ...]

    @property
    def data_key(self) -> bytes:
        return self.key[:16]

    @property
    def tweak_key(self) -> bytes:
        return self.key[16:]

    @property
    def known(self) -> list[int]:
        return [i for i, s in enumerate(self.sectors) if s.plaintext is not None]

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "key": self.key.hex(),
            "sectors": [{"sector": s.sector, "ciphertext": s.ciphertext.hex(),
                         "plaintext": s.plaintext.hex() if s.plaintext is not None else None}
                        for s in self.sectors],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DiskFixture":
        d = json.loads(text)
        if d.get("version") != 1:
            raise ValueError("unsupported fixture version")
        key = bytes.fromhex(d["key"])
        if len(key) != 32:
            raise ValueError("fixture key must be 64 hex characters")
        recs = tuple(SectorRecord(int(s["sector"]), bytes.fromhex(s["ciphertext"]),
                                  None if s["plaintext"] is None else bytes.fromhex(s["plaintext"]))
                     for s in d["sectors"])
        return cls(key, recs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DiskFixture":
        return cls.from_json(Path(path).read_text())


def make_fixture(seed: int, sectors: int = 70, known: int = 34) -> DiskFixture:
    """Random key, ``sectors`` distinct sector numbers below 2**32, ``known`` plaintexts revealed."""
    if sectors < 1 or known < 0 or known > sectors:
        raise ValueError("need sectors >= 1 and 0 <= known <= sectors")
    rng = np.random.default_rng(seed)
    key = bytes(rng.integers(0, 256, 32, dtype=np.uint8))
    cipher = XtsCipher(key)
    numbers = rng.choice(1 << 32, size=sectors, replace=False)
    known_idx = set(rng.choice(sectors, size=known, replace=False).tolist())
    recs = []
    for i, n in enumerate(numbers):
        pt = bytes(rng.integers(0, 256, SECTOR_SIZE, dtype=np.uint8))
        ct = cipher.encrypt(pt, int(n))
        recs.append(SectorRecord(int(n), ct, pt if i in known_idx else None))
    return DiskFixture(key, tuple(recs))
