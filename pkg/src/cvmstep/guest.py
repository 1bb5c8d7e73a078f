"""Guest VM model: instruction stream, nested translation with a TLB, timing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
DIV_DIVISOR = (1 << 64) - 1


class Op(str, Enum):
    NOP = "nop"
    ADD = "add"
    MUL = "mul"
    DIV = "div"
    RDRAND = "rdrand"
    LAR = "lar"
    LOAD = "load"
    STORE = "store"
    FENCE = "fence"
    GENERIC = "generic"


class Access(str, Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


DEFAULT_LATENCY = {
    Op.NOP: 1,
    Op.ADD: 1,
    Op.MUL: 3,
    Op.DIV: 8,
    Op.RDRAND: 1200,
    Op.LAR: 48,
    Op.LOAD: 4,
    Op.STORE: 1,
    Op.FENCE: 4,
    Op.GENERIC: 1,
}


def quotient_bits(dividend: int, divisor: int = DIV_DIVISOR) -> int:
    return (dividend // divisor).bit_length()


def div_latency(dividend: int, divisor: int = DIV_DIVISOR, base: int = 8) -> int:
    """8 cycles plus one for every started group of 9 significant quotient bits."""
    return base + math.ceil(quotient_bits(dividend, divisor) / 9)


@dataclass(frozen=True)
class Instruction:
    op: Op
    latency: int = 1
    mem: tuple[int, ...] = ()
    meta: Optional[int] = None
    table: Optional[str] = None
    handler: bool = False

    def __post_init__(self):
        if self.latency < 1:
            raise ValueError("base latency must be >= 1")
        if self.op is Op.FENCE and self.mem:
            raise ValueError("fence instructions take no memory operands")

    @classmethod
    def make(cls, op, latency=None, mem=(), meta=None, table=None, handler=False):
        op = Op(op)
        if latency is None:
            latency = div_latency(meta) if op is Op.DIV and meta is not None else DEFAULT_LATENCY[op]
        return cls(op, latency, tuple(mem), meta, table, handler)

    @property
    def access(self) -> Access:
        return Access.WRITE if self.op is Op.STORE else Access.READ


@dataclass
class PageEntry:
    gpa: int
    hpa: int
    present: bool = True
    no_execute: bool = False
    writable: bool = True
    accessed: bool = False
    c_bit: bool = True

    def permits(self, access: Access) -> bool:
        if not self.present:
            return False
        if access is Access.EXECUTE:
            return not self.no_execute
        if access is Access.WRITE:
            return self.writable
        return True


class Tlb:
    """Fully associative; FIFO eviction when a capacity is set."""

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self.entries: dict[int, int] = {}

    def lookup(self, gpa: int) -> Optional[int]:
        return self.entries.get(gpa)

    def insert(self, gpa: int, hpa: int) -> None:
        if self.capacity is not None and gpa not in self.entries and len(self.entries) >= self.capacity:
            del self.entries[next(iter(self.entries))]
        self.entries[gpa] = hpa

    def invalidate(self, gpa: int) -> None:
        self.entries.pop(gpa, None)

    def flush(self) -> None:
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


@dataclass
class GuestProgram:
    instructions: list[Instruction]
    code_layout: list[int]
    entry_index: int = 0
    functions: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.code_layout) != len(self.instructions):
            raise ValueError("code layout must cover every instruction")

    def __len__(self):
        return len(self.instructions)

    def code_pages(self) -> set[int]:
        return {a >> PAGE_SHIFT for a in self.code_layout}


@dataclass(frozen=True)
class Fault:
    gpa: int
    access: Access
    index: int


@dataclass(frozen=True)
class RetireRecord:
    index: int
    issue_time: int
    retire_time: int
    walk_penalties: int = 0
    faulted: Optional[Fault] = None
    handler: bool = False


@dataclass(frozen=True)
class Translation:
    paddr: int
    latency: int


@dataclass
class TimingConfig:
    tlb_hit: int = 2
    page_walk: int = 400
    abit_set: int = 150


HANDLER_FILLER = Instruction(Op.GENERIC, 1, handler=True)


class Clock:
    """Shared cycle counter read by both the host timestamps and the guest."""

    def __init__(self, now: int = 0):
        self.now = now

    def advance(self, cycles: int) -> None:
        self.now += cycles

    def read(self) -> int:
        return self.now


class GuestVM:
    """One vCPU executing a GuestProgram.

    ``memory`` is called with each host-physical data address the guest
    touches and returns the extra latency of that access (the cache).
    """

    def __init__(
        self,
        program: GuestProgram,
        pages: dict[int, PageEntry],
        timing: Optional[TimingConfig] = None,
        memory: Optional[Callable[[int], int]] = None,
        tlb_capacity: Optional[int] = None,
        handler_page: Optional[int] = None,
        clock: Optional[Clock] = None,
    ):
        self.program = program
        self.pages = pages
        self.timing = timing or TimingConfig()
        self.memory = memory
        self.tlb = Tlb(tlb_capacity)
        self.cursor = program.entry_index
        self.timer = clock or Clock()
        self.retired = 0
        self.faults = 0
        self.handler_pending = 0
        self.handler_page = handler_page
        self._fresh_entry = True
        self._last_code_page: Optional[int] = None

    @property
    def clock(self) -> int:
        return self.timer.now

    @clock.setter
    def clock(self, value: int) -> None:
        self.timer.now = value

    # translation -----------------------------------------------------
    def _entry(self, gpa: int) -> PageEntry:
        try:
            return self.pages[gpa]
        except KeyError:
            raise ValueError(f"address outside mapped range: page {gpa:#x}") from None

    def translate(self, vaddr: int, access: Access, index: int = -1):
        page = vaddr >> PAGE_SHIFT
        entry = self._entry(page)
        if not entry.permits(access):
            self.faults += 1
            return Fault(page, access, index)
        t = self.timing
        hpa = self.tlb.lookup(page)
        if hpa is not None:
            lat = t.tlb_hit
        else:
            lat = t.tlb_hit + t.page_walk
            if not entry.accessed:
                lat += t.abit_set
                entry.accessed = True
            hpa = entry.hpa
            self.tlb.insert(page, hpa)
        return Translation((hpa << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1)), lat)

    def peek_translate(self, vaddr: int, access: Access = Access.READ) -> Optional[int]:
        """Host-physical address without timing or state side effects."""
        entry = self.pages.get(vaddr >> PAGE_SHIFT)
        if entry is None or not entry.permits(access):
            return None
        return (entry.hpa << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1))

    def flush_tlb(self) -> None:
        self.tlb.flush()

    def reset_accessed_bit(self, gpa: int) -> None:
        self._entry(gpa).accessed = False

    def set_permissions(self, gpa: int, **bits) -> None:
        entry = self._entry(gpa)
        for k, v in bits.items():
            if k not in ("present", "no_execute", "writable"):
                raise ValueError(f"unknown permission bit {k}")
            setattr(entry, k, v)
        self.tlb.invalidate(gpa)

    # execution -------------------------------------------------------
    @property
    def done(self) -> bool:
        return self.handler_pending == 0 and self.cursor >= len(self.program)

    def enter(self) -> None:
        self._fresh_entry = True

    def advance(self, cycles: int) -> None:
        self.clock += cycles

    def next_code_page(self) -> Optional[int]:
        if self.handler_pending and self.handler_page is not None:
            return self.handler_page
        if self.cursor >= len(self.program):
            return None
        return self.program.code_layout[self.cursor] >> PAGE_SHIFT

    def step_instruction(self) -> RetireRecord:
        handler = self.handler_pending > 0
        if handler:
            ins = HANDLER_FILLER
            code_addr = (self.handler_page or 0) << PAGE_SHIFT
        else:
            if self.cursor >= len(self.program):
                raise IndexError("cursor past end of program")
            ins = self.program.instructions[self.cursor]
            code_addr = self.program.code_layout[self.cursor]
        issue = self.clock
        lat = 0
        walks = 0
        hit = self.timing.tlb_hit
        code_page = code_addr >> PAGE_SHIFT
        if not handler and (self._fresh_entry or code_page != self._last_code_page):
            tr = self.translate(code_addr, Access.EXECUTE, self.cursor)
            if isinstance(tr, Fault):
                return self._fault(issue, lat, walks, tr)
            lat += tr.latency
            walks += tr.latency - hit
        paddrs = []
        for addr in ins.mem:
            tr = self.translate(addr, ins.access, self.cursor)
            if isinstance(tr, Fault):
                return self._fault(issue, lat, walks, tr)
            lat += tr.latency
            walks += tr.latency - hit
            paddrs.append(tr.paddr)
        if self.memory is not None:
            for p in paddrs:
                lat += self.memory(p)
        retire = issue + lat + ins.latency
        self.clock = retire
        self._fresh_entry = False
        self.retired += 1
        if handler:
            self.handler_pending -= 1
            return RetireRecord(-1, issue, retire, walks, handler=True)
        self._last_code_page = code_page
        idx = self.cursor
        self.cursor += 1
        return RetireRecord(idx, issue, retire, walks)

    def _fault(self, issue, lat, walks, fault: Fault) -> RetireRecord:
        self.clock = issue + max(lat, 1)
        return RetireRecord(self.cursor, issue, self.clock, walks, faulted=fault)

    def run(self, max_instructions: Optional[int] = None, until_time: Optional[int] = None):
        """Free-run until a fault, program end, an instruction budget or a deadline."""
        records = []
        while not self.done:
            if max_instructions is not None and len(records) >= max_instructions:
                break
            if until_time is not None and self.clock > until_time:
                break
            rec = self.step_instruction()
            records.append(rec)
            if rec.faulted is not None:
                break
        return records


def parse_program(text: str, code_base: int = 0x10000, stride: int = 4) -> GuestProgram:
    """Parse ``<opcode> [lat=n] [mem=hex,...] [table=id] [div=hex]`` lines."""
    instructions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        kwargs: dict = {}
        for tok in rest:
            key, sep, val = tok.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: malformed token {tok!r}")
            if key == "lat":
                kwargs["latency"] = int(val, 0)
            elif key == "mem":
                kwargs["mem"] = tuple(int(v, 16) for v in val.split(",") if v)
            elif key == "table":
                kwargs["table"] = val
            elif key == "div":
                kwargs["meta"] = int(val, 16)
            else:
                raise ValueError(f"line {lineno}: unknown field {key!r}")
        try:
            instructions.append(Instruction.make(head, **kwargs))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    layout = [code_base + stride * i for i in range(len(instructions))]
    return GuestProgram(instructions, layout)


def identity_pages(pfns, hpa_offset: int = 0, **bits) -> dict[int, PageEntry]:
    return {p: PageEntry(p, p + hpa_offset, **bits) for p in pfns}
