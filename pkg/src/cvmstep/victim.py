"""Kernel-like placement of the XTS/AES victim and compilation to a GuestProgram."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .crypto.aes import (
    DEC_FINAL,
    DEC_POSITIONS,
    DEC_TABLES,
    ENC_FINAL,
    ENC_POSITIONS,
    ENC_TABLES,
    AccessScript,
    ttable_decrypt,
    ttable_encrypt,
)
from .crypto.xts import XtsCipher, plain64_iv
from .guest import PAGE_SHIFT, PAGE_SIZE, GuestProgram, Instruction, Op, PageEntry
from .pftrack import Fingerprint, FingerprintEntry

INSTR_SIZE = 4

# page offsets (relative to the start of .text) of the functions on the
# single-block XTS decryption path
XTS_DECRYPT_PAGE = 0x65C
CIPHER_ENCRYPT_ONE_PAGE = 0x64B
AES_ENCRYPT_PAGE = 0x65F
ECB_DECRYPT_PAGE = 0x65B
AES_DECRYPT_PAGE = 0x660

# start offsets inside the first page, chosen so each cipher function
# spills onto the following page
AES_ENCRYPT_START = 0xC00
AES_DECRYPT_START = 0xA00

XTS_FINGERPRINT = Fingerprint((
    FingerprintEntry(0x65C, "marker", "xts_decrypt"),
    FingerprintEntry(0x64B, "marker", "crypto_cipher_encrypt_one"),
    FingerprintEntry(0x65F, "payload", "crypto_aes_encrypt (tweak generation)"),
    FingerprintEntry(0x660, "payload", "crypto_aes_encrypt (tweak generation)"),
    FingerprintEntry(0x65B, "marker", "crypto_ecb_decrypt"),
    FingerprintEntry(0x660, "payload", "crypto_aes_decrypt"),
    FingerprintEntry(0x661, "payload", "crypto_aes_decrypt"),
))

CIPHER_PAGES = (0x65F, 0x660, 0x661)
TEXT_PAGES = 0x800


class LayoutError(ValueError):
    pass


@dataclass
class KernelLayout:
    text_base: int
    data_base: int
    hpa: dict[int, int]
    tables: dict[str, int] = field(default_factory=dict)

    # data page order inside the data region
    DATA_PAGES = ("enc", "encf", "dec", "decf", "ctx", "buf", "stack")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "KernelLayout":
        # KASLR-style: 2 MiB aligned text base, data region elsewhere
        text_base = 0x40000 + 0x200 * int(rng.integers(0, 256))
        data_base = text_base + 0x4000 + 0x10 * int(rng.integers(0, 1024))
        pfns = list(range(text_base, text_base + TEXT_PAGES)) + [data_base + i for i in range(len(cls.DATA_PAGES))]
        hpas = rng.choice(1 << 20, size=len(pfns), replace=False) + 0x200000
        layout = cls(text_base, data_base, {p: int(h) for p, h in zip(pfns, hpas)})
        layout._place_tables()
        return layout

    def _place_tables(self) -> None:
        enc = self.data_pfn("enc") << PAGE_SHIFT
        dec = self.data_pfn("dec") << PAGE_SHIFT
        for i, name in enumerate(ENC_TABLES):
            self.tables[name] = enc + 1024 * i
        for i, name in enumerate(DEC_TABLES):
            self.tables[name] = dec + 1024 * i
        self.tables[ENC_FINAL] = self.data_pfn("encf") << PAGE_SHIFT
        self.tables[DEC_FINAL] = self.data_pfn("decf") << PAGE_SHIFT
        code = set(range(self.text_base, self.text_base + TEXT_PAGES))
        for name, base in self.tables.items():
            if base % 64:
                raise LayoutError(f"table {name} not cache-line aligned")
            if (base >> PAGE_SHIFT) in code:
                raise LayoutError(f"table {name} collides with code")

    def data_pfn(self, name: str) -> int:
        return self.data_base + self.DATA_PAGES.index(name)

    def data_pages(self) -> list[int]:
        return [self.data_pfn(n) for n in self.DATA_PAGES]

    def code_pfn(self, offset: int) -> int:
        return self.text_base + offset

    def table_page(self, name: str) -> int:
        return self.tables[name] >> PAGE_SHIFT

    def table_hpa(self, name: str) -> int:
        gpa = self.tables[name]
        return (self.hpa[gpa >> PAGE_SHIFT] << PAGE_SHIFT) | (gpa & (PAGE_SIZE - 1))

    def page_entries(self) -> dict[int, PageEntry]:
        entries = {}
        data = set(self.data_pages())
        for gpa, hpa in self.hpa.items():
            if gpa in data:
                entries[gpa] = PageEntry(gpa, hpa, no_execute=True)
            else:
                entries[gpa] = PageEntry(gpa, hpa, writable=False)
        return entries


@dataclass(frozen=True)
class TableAccess:
    ordinal: int
    round: int
    table: str
    position: int


@dataclass(frozen=True)
class FunctionManifest:
    """Offline-analysis result: table loads by ordinal since function entry."""

    direction: str
    length: int
    accesses: tuple[TableAccess, ...]

    def by_ordinal(self) -> dict[int, TableAccess]:
        return {a.ordinal: a for a in self.accesses}


def _aes_function(direction: str, script: Optional[AccessScript], layout: KernelLayout,
                  key_area: int, fenced: bool) -> tuple[list[Instruction], list[Optional[tuple]]]:
    """Instruction list for one block operation plus per-instruction access info."""
    enc = direction == "encrypt"
    buf = layout.data_pfn("buf") << PAGE_SHIFT
    ctx = (layout.data_pfn("ctx") << PAGE_SHIFT) + key_area
    lookups = list(script) if script is not None else None
    instrs: list[Instruction] = []
    info: list[Optional[tuple]] = []

    def emit(ins, meta=None):
        instrs.append(ins)
        info.append(meta)

    for c in range(4):
        emit(Instruction.make(Op.LOAD, mem=[buf + 4 * c]))
        emit(Instruction.make(Op.LOAD, mem=[ctx + 4 * c]))
        emit(Instruction.make(Op.ADD))
    n = 0
    round_tables = ENC_TABLES if enc else DEC_TABLES
    final = ENC_FINAL if enc else DEC_FINAL
    positions = ENC_POSITIONS if enc else DEC_POSITIONS
    for rnd in range(1, 11):
        for c in range(4):
            for t in range(4):
                tname = round_tables[t] if rnd < 10 else final
                idx = lookups[n].index if lookups is not None else 0
                if lookups is not None:
                    lk = lookups[n]
                    assert lk.round == rnd and lk.table == tname and lk.position == positions[c][t]
                n += 1
                emit(Instruction.make(Op.LOAD, mem=[layout.tables[tname] + 4 * idx], table=tname),
                     (rnd, tname, positions[c][t], idx))
                if fenced:
                    emit(Instruction.make(Op.FENCE))
                if rnd == 10:
                    emit(Instruction.make(Op.ADD))
                emit(Instruction.make(Op.ADD))
            emit(Instruction.make(Op.LOAD, mem=[ctx + 16 * rnd + 4 * c]))
            emit(Instruction.make(Op.ADD))
    for c in range(4):
        emit(Instruction.make(Op.STORE, mem=[buf + 16 + 4 * c]))
    emit(Instruction.make(Op.GENERIC))
    return instrs, info


def function_manifest(direction: str, fenced: bool = False) -> FunctionManifest:
    dummy = KernelLayout(0x1000, 0x9000, {})
    dummy._place_tables()
    instrs, info = _aes_function(direction, None, dummy, 0, fenced)
    acc = tuple(TableAccess(i, m[0], m[1], m[2]) for i, m in enumerate(info) if m is not None)
    return FunctionManifest(direction, len(instrs), acc)


@dataclass
class XtsRequest:
    sector: int
    ciphertext: bytes  # one 16-byte block


@dataclass
class LoadTruth:
    request: int
    direction: str
    round: int
    table: str
    position: int
    index: int


@dataclass
class VictimProgram:
    program: GuestProgram
    layout: KernelLayout
    truth: dict[int, LoadTruth]
    function_starts: list[tuple[int, str, int]]  # (request, direction, program index)
    plaintexts: list[bytes]
    fenced: bool = False


class _Builder:
    def __init__(self, layout: KernelLayout):
        self.layout = layout
        self.instrs: list[Instruction] = []
        self.addrs: list[int] = []

    def place(self, page_offset: int, start: int, instrs: Sequence[Instruction]) -> int:
        first = len(self.instrs)
        base = (self.layout.code_pfn(page_offset) << PAGE_SHIFT) + start
        for i, ins in enumerate(instrs):
            self.instrs.append(ins)
            self.addrs.append(base + INSTR_SIZE * i)
        return first


def _generic(n: int, mem: Sequence[int] = ()) -> list[Instruction]:
    out = []
    for i in range(n):
        if mem and i % 4 == 1:
            out.append(Instruction.make(Op.LOAD, mem=[mem[i % len(mem)]]))
        else:
            out.append(Instruction.make(Op.GENERIC))
    return out


def compile_xts_requests(requests: Sequence[XtsRequest], cipher: XtsCipher, layout: KernelLayout,
                         fenced: bool = False, interlude: int = 0,
                         rng: Optional[np.random.Generator] = None) -> VictimProgram:
    """One single-block XTS decryption per request, laid out on the fingerprint pages.

    ``interlude`` inserts that many short runs of unrelated kernel code
    (on pages outside the fingerprint) between requests.
    """
    b = _Builder(layout)
    truth: dict[int, LoadTruth] = {}
    starts = []
    plaintexts = []
    stack = layout.data_pfn("stack") << PAGE_SHIFT
    avoid = set(CIPHER_PAGES) | {XTS_DECRYPT_PAGE, CIPHER_ENCRYPT_ONE_PAGE, ECB_DECRYPT_PAGE}
    for j, req in enumerate(requests):
        iv = plain64_iv(req.sector)
        tweak, tscript = ttable_encrypt(iv, cipher.tweak_sched)
        x = bytes(a ^ t for a, t in zip(req.ciphertext, tweak))
        y, dscript = ttable_decrypt(x, cipher.data_sched)
        plaintexts.append(bytes(a ^ t for a, t in zip(y, tweak)))

        b.place(XTS_DECRYPT_PAGE, 0x200, _generic(24, [stack]))
        b.place(CIPHER_ENCRYPT_ONE_PAGE, 0x100, _generic(12, [stack]))
        for direction, script, page, start, key_area in (
            ("encrypt", tscript, AES_ENCRYPT_PAGE, AES_ENCRYPT_START, 0),
            (None, None, ECB_DECRYPT_PAGE, 0x300, None),
            ("decrypt", dscript, AES_DECRYPT_PAGE, AES_DECRYPT_START, 512),
        ):
            if direction is None:
                b.place(page, start, _generic(16, [stack]))
                continue
            instrs, info = _aes_function(direction, script, layout, key_area, fenced)
            first = b.place(page, start, instrs)
            starts.append((j, direction, first))
            for i, m in enumerate(info):
                if m is not None:
                    truth[first + i] = LoadTruth(j, direction, *m)
        if interlude and rng is not None:
            for _ in range(interlude):
                while True:
                    off = int(rng.integers(0x10, TEXT_PAGES))
                    if off not in avoid:
                        break
                b.place(off, 0x40 * int(rng.integers(0, 32)), _generic(int(rng.integers(4, 24)), [stack]))
    program = GuestProgram(b.instrs, b.addrs)
    return VictimProgram(program, layout, truth, starts, plaintexts, fenced)


def control_workload(layout: KernelLayout, rng: np.random.Generator, segments: int = 400) -> GuestProgram:
    """Random walk over kernel text that never runs the AES cipher pages."""
    b = _Builder(layout)
    stack = layout.data_pfn("stack") << PAGE_SHIFT
    marker_pages = [XTS_DECRYPT_PAGE, CIPHER_ENCRYPT_ONE_PAGE, ECB_DECRYPT_PAGE]
    for _ in range(segments):
        if rng.random() < 0.3:
            off = marker_pages[int(rng.integers(len(marker_pages)))]
        else:
            while True:
                off = int(rng.integers(0x10, TEXT_PAGES))
                if off not in CIPHER_PAGES:
                    break
        b.place(off, 0x40 * int(rng.integers(0, 32)), _generic(int(rng.integers(2, 16)), [stack]))
    return GuestProgram(b.instrs, b.addrs)


def key_schedule_words(cipher: XtsCipher) -> dict[int, bytes]:
    """Context-page contents (offset -> bytes) for completeness of the layout."""
    out = {}
    for r, rk in enumerate(cipher.tweak_sched.round_keys):
        out[16 * r] = rk
    for r, dk in enumerate(cipher.data_sched.inverse_round_keys):
        out[512 + 16 * r] = dk
    return out
