"""Page-fault controlled channel: page tracking, fingerprints, table location."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from .guest import Access, GuestVM


class TrackMode(str, Enum):
    ACCESS = "access"
    EXECUTE = "execute"
    WRITE = "write"


_MODE_BITS = {
    TrackMode.ACCESS: ("present", False),
    TrackMode.EXECUTE: ("no_execute", True),
    TrackMode.WRITE: ("writable", False),
}


@dataclass(frozen=True)
class PageFaultEvent:
    gpa: int
    access: Access
    index: int
    step: Optional[object] = None


class PageTracker:
    """Adjusts permission bits and restores the page's original bits on untrack."""

    def __init__(self, vm: GuestVM):
        self.vm = vm
        self.tracked: dict[int, set[TrackMode]] = {}
        self._original: dict[int, tuple[bool, bool, bool]] = {}

    def track(self, gpas: Iterable[int], mode: TrackMode) -> None:
        mode = TrackMode(mode)
        attr, value = _MODE_BITS[mode]
        for gpa in gpas:
            entry = self.vm._entry(gpa)
            if gpa not in self._original:
                self._original[gpa] = (entry.present, entry.no_execute, entry.writable)
            self.tracked.setdefault(gpa, set()).add(mode)
            self.vm.set_permissions(gpa, **{attr: value})

    def untrack(self, gpa: int) -> None:
        self.vm._entry(gpa)
        orig = self._original.pop(gpa, None)
        self.tracked.pop(gpa, None)
        if orig is not None:
            present, nx, writable = orig
            self.vm.set_permissions(gpa, present=present, no_execute=nx, writable=writable)

    def untrack_all(self) -> None:
        for gpa in list(self.tracked):
            self.untrack(gpa)

    def is_tracked(self, gpa: int) -> bool:
        return gpa in self.tracked


@dataclass(frozen=True)
class FingerprintEntry:
    offset: int
    role: str
    label: str = ""

    def __post_init__(self):
        if self.role not in ("marker", "payload"):
            raise ValueError(f"unknown fingerprint role {self.role!r}")


@dataclass(frozen=True)
class Fingerprint:
    entries: tuple[FingerprintEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("fingerprint must not be empty")

    @property
    def offsets(self) -> list[int]:
        return [e.offset for e in self.entries]

    def __len__(self):
        return len(self.entries)

    @classmethod
    def parse(cls, text: str) -> "Fingerprint":
        entries = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 2)
            if len(parts) < 2:
                raise ValueError(f"malformed fingerprint line {raw!r}")
            entries.append(FingerprintEntry(int(parts[0], 16), parts[1], parts[2] if len(parts) > 2 else ""))
        return cls(tuple(entries))

    def dump(self) -> str:
        return "".join(f"{e.offset:#x} {e.role} {e.label}".rstrip() + "\n" for e in self.entries)


def run_fingerprint_capture(vm: GuestVM, text_base: int, code_pages: Optional[Iterable[int]] = None,
                            max_faults: int = 1_000_000) -> list[int]:
    """Log the code-page sequence with a one-page sliding window of untracked pages."""
    pages = set(code_pages) if code_pages is not None else vm.program.code_pages()
    tracker = PageTracker(vm)
    tracker.track(pages, TrackMode.EXECUTE)
    log: list[int] = []
    previous: Optional[int] = None
    while not vm.done and len(log) < max_faults:
        vm.enter()
        records = vm.run()
        if not records or records[-1].faulted is None:
            continue
        fault = records[-1].faulted
        if fault.access is not Access.EXECUTE:
            raise RuntimeError(f"unexpected data fault on page {fault.gpa:#x}")
        log.append(fault.gpa - text_base)
        tracker.untrack(fault.gpa)
        if previous is not None and previous in pages:
            tracker.track([previous], TrackMode.EXECUTE)
        previous = fault.gpa
    tracker.untrack_all()
    return log


@dataclass
class MatchStep:
    entry: FingerprintEntry
    position: int
    completed: bool


class FingerprintMatcher:
    """Live matcher that keeps exactly one page (the next expected one) tracked.

    A tracked fault that is not the expected page holds the current state.
    """

    def __init__(self, fingerprint: Fingerprint, text_base: int):
        self.fingerprint = fingerprint
        self.text_base = text_base
        self.state = 0
        self.matches = 0

    @property
    def expected_gpa(self) -> int:
        return self.text_base + self.fingerprint.entries[self.state].offset

    def on_fault(self, gpa: int) -> Optional[MatchStep]:
        if gpa != self.expected_gpa:
            return None
        entry = self.fingerprint.entries[self.state]
        pos = self.state
        self.state += 1
        done = self.state == len(self.fingerprint)
        if done:
            self.state = 0
            self.matches += 1
        return MatchStep(entry, pos, done)


def match_fingerprint(stream: Sequence[int], fingerprint: Fingerprint) -> list[int]:
    """Offline matching over a stream of base-relative page offsets.

    Only pages some partial match is waiting for would fault, so unrelated
    pages are skipped.  Overlapping matches are reported separately.
    Returns the stream positions where a match completes.
    """
    offs = fingerprint.offsets
    n = len(offs)
    states: list[int] = []
    ends = []
    for i, page in enumerate(stream):
        advanced = []
        for s in states:
            if offs[s] == page:
                if s + 1 == n:
                    ends.append(i)
                else:
                    advanced.append(s + 1)
            else:
                advanced.append(s)
        if offs[0] == page:
            if n == 1:
                ends.append(i)
            else:
                advanced.append(1)
        states = sorted(set(advanced))
    return sorted(set(ends))


def locate_table(vm: GuestVM, data_pages: Iterable[int], max_faults: int = 64) -> int:
    """Return the last data page faulted by the next instruction before it retires."""
    tracker = PageTracker(vm)
    pages = list(data_pages)
    tracker.track(pages, TrackMode.ACCESS)
    last: Optional[int] = None
    try:
        for _ in range(max_faults):
            vm.enter()
            rec = vm.step_instruction()
            if rec.faulted is None:
                if last is None:
                    raise ValueError("instruction performs no tracked data access")
                return last
            fault = rec.faulted
            if fault.access is not Access.EXECUTE:
                last = fault.gpa
            tracker.untrack(fault.gpa)
        raise RuntimeError("instruction did not retire within the fault budget")
    finally:
        tracker.untrack_all()
