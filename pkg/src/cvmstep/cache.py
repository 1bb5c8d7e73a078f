"""Set-associative L2 model with ASID/C-bit tagged lines and Prime+Probe."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .guest import PAGE_SHIFT, Clock, GuestProgram, Op

HOST_ASID = 0
VM_ASID = 1
TABLE_LINES = 16


@dataclass(frozen=True)
class CacheGeometry:
    line_size: int = 64
    sets: int = 1024
    ways: int = 8
    hit_latency: int = 14
    miss_latency: int = 200

    def __post_init__(self):
        for name in ("line_size", "sets", "ways"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two")
        if self.miss_latency <= self.hit_latency:
            raise ValueError("miss latency must exceed hit latency")

    def set_index(self, paddr: int) -> int:
        return (paddr // self.line_size) % self.sets


@dataclass(frozen=True)
class CacheLineTag:
    line: int
    asid: int
    c_bit: bool

    def encode(self) -> int:
        return (self.line << 17) | (self.asid << 1) | int(self.c_bit)

    @classmethod
    def decode(cls, key: int) -> "CacheLineTag":
        return cls(key >> 17, (key >> 1) & 0xFFFF, bool(key & 1))


@dataclass
class PerfCounters:
    l2_hit: int = 0
    l2_miss: int = 0

    @property
    def l2_accesses(self) -> int:
        return self.l2_hit + self.l2_miss


class Cache:
    """LRU sets stored as lists (least recent first) of encoded tags."""

    def __init__(self, geometry: Optional[CacheGeometry] = None, clock: Optional[Clock] = None):
        self.geometry = geometry or CacheGeometry()
        self.sets: list[list[int]] = [[] for _ in range(self.geometry.sets)]
        self.version = [0] * self.geometry.sets
        self.counters = PerfCounters()
        self.clock = clock
        # sets whose recency order is pending a reversal (lazy probe walks)
        self.lazy_reversed: set[int] = set()

    def _materialize(self) -> None:
        for s in self.lazy_reversed:
            self.sets[s].reverse()
        self.lazy_reversed.clear()

    def access(self, paddr: int, asid: int = HOST_ASID, c_bit: bool = False) -> tuple[bool, int]:
        g = self.geometry
        line = paddr // g.line_size
        s = line % g.sets
        key = (line << 17) | (asid << 1) | int(c_bit)
        ways = self.sets[s]
        if s in self.lazy_reversed:
            self.lazy_reversed.discard(s)
            ways.reverse()
        self.version[s] += 1
        if key in ways:
            ways.remove(key)
            ways.append(key)
            self.counters.l2_hit += 1
            lat = g.hit_latency
            hit = True
        else:
            if len(ways) >= g.ways:
                del ways[0]
            ways.append(key)
            self.counters.l2_miss += 1
            lat = g.miss_latency
            hit = False
        if self.clock is not None:
            self.clock.advance(lat)
        return hit, lat

    def contains(self, paddr: int, asid: int, c_bit: bool) -> bool:
        g = self.geometry
        line = paddr // g.line_size
        return ((line << 17) | (asid << 1) | int(c_bit)) in self.sets[line % g.sets]

    def lines_owned_by(self, asid: int) -> list[tuple[int, CacheLineTag]]:
        out = []
        for s, ways in enumerate(self.sets):
            for key in ways:
                tag = CacheLineTag.decode(key)
                if tag.asid == asid:
                    out.append((s, tag))
        return out

    def snapshot(self) -> list[tuple[int, ...]]:
        self._materialize()
        return [tuple(w) for w in self.sets]

    def guest_port(self, asid: int = VM_ASID, c_bit: bool = True) -> Callable[[int], int]:
        """Memory hook for a GuestVM; the guest clock accounts the latency itself."""

        def port(paddr: int) -> int:
            clock, self.clock = self.clock, None
            try:
                return self.access(paddr, asid, c_bit)[1]
            finally:
                self.clock = clock

        return port


class AllocatorExhausted(RuntimeError):
    pass


class PageAllocator:
    """Hands out host page frames, optionally constrained to a residue class."""

    def __init__(self, rng: np.random.Generator, pool: int = 1 << 16, base_pfn: int = 0x100000):
        self.rng = rng
        self.base = base_pfn
        self.pool = pool
        self.used: set[int] = set()

    def reserve(self, pfns: Iterable[int]) -> None:
        self.used.update(pfns)

    def alloc(self, residue: Optional[int] = None, modulus: int = 1) -> int:
        for _ in range(64):
            pfn = self.base + int(self.rng.integers(self.pool))
            if residue is not None:
                pfn += (residue - pfn) % modulus
            if pfn not in self.used:
                self.used.add(pfn)
                return pfn
        # fall back to a linear scan before giving up
        for off in range(self.pool):
            pfn = self.base + off
            if residue is not None and pfn % modulus != residue % modulus:
                continue
            if pfn not in self.used:
                self.used.add(pfn)
                return pfn
        raise AllocatorExhausted("no free page frame in the requested residue class")


@dataclass
class EvictionSet:
    target_set: int
    members: list[int]
    order: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.order:
            self.order = list(range(len(self.members)))


def build_eviction_set(cache: Cache, target_set: int, allocator: PageAllocator, asid: int = HOST_ASID) -> EvictionSet:
    g = cache.geometry
    lines_per_page = (1 << PAGE_SHIFT) // g.line_size
    page_mod = max(1, g.sets // lines_per_page)
    line_in_page = target_set % lines_per_page
    residue = (target_set // lines_per_page) % page_mod
    members = []
    for _ in range(g.ways):
        pfn = allocator.alloc(residue, page_mod)
        members.append((pfn << PAGE_SHIFT) + line_in_page * g.line_size)
    es = EvictionSet(target_set, members)
    if any(g.set_index(m) != target_set for m in members):
        raise AssertionError("eviction set member maps to the wrong set")
    # self-eviction check: the set fits exactly, one more congruent line evicts
    for m in members:
        cache.access(m, asid)
    if not all(cache.access(m, asid)[0] for m in members):
        raise AssertionError("eviction set does not fit its target set")
    return es


@dataclass
class CacheTrace:
    latency: np.ndarray
    hot: np.ndarray
    truth: Optional[int] = None

    def __post_init__(self):
        if len(self.hot) != TABLE_LINES or len(self.latency) != TABLE_LINES:
            raise ValueError("a cache trace covers exactly 16 sets")

    def hot_sets(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.hot)]


class PrimeProbe:
    """Attacker-side Prime+Probe over a fixed list of eviction sets.

    Probing walks each set from most to least recently primed line, so a
    single foreign line in the set costs exactly one miss and the probe
    leaves the set fully primed again.
    """

    def __init__(
        self,
        cache: Cache,
        esets: Sequence[EvictionSet],
        rng: np.random.Generator,
        asid: int = HOST_ASID,
        jitter: float = 2.0,
        p_noise: float = 0.02,
        threshold: Optional[float] = None,
    ):
        self.cache = cache
        self.esets = list(esets)
        self.rng = rng
        self.asid = asid
        self.jitter = jitter
        self.p_noise = p_noise
        g = cache.geometry
        self.threshold = threshold if threshold is not None else g.ways * g.hit_latency + (g.miss_latency - g.hit_latency) / 2
        self._sets = [es.target_set for es in self.esets]
        self._all_sets = frozenset(self._sets)
        if len(self._all_sets) != len(self._sets):
            raise ValueError("eviction sets must target distinct sets")
        self._clean_version = [None] * len(self.esets)
        self._flips = [0] * len(self.esets)

    def _sync_order(self, i: int) -> None:
        if self._flips[i] & 1:
            self.esets[i].order.reverse()
        self._flips[i] = 0

    def prime(self) -> None:
        for i, es in enumerate(self.esets):
            self._sync_order(i)
            for j in es.order:
                self.cache.access(es.members[j], self.asid)
            self._clean_version[i] = self.cache.version[es.target_set]

    def _probe_raw(self) -> np.ndarray:
        """Walk every set from most to least recently used line.

        Sets untouched since the previous walk are known to hit on every
        member; for those only the recency reversal is recorded (lazily).
        """
        cache = self.cache
        g = cache.geometry
        ver = cache.version
        cv = self._clean_version
        sets = self._sets
        dirty = [i for i, s in enumerate(sets) if ver[s] != cv[i]]
        fast_total = g.ways * g.hit_latency
        out = np.full(len(sets), float(fast_total))
        flips = self._flips
        for i in range(len(flips)):
            flips[i] += 1
        clean = self._all_sets.difference(sets[i] for i in dirty) if dirty else self._all_sets
        cache.lazy_reversed.symmetric_difference_update(clean)
        cache.counters.l2_hit += g.ways * len(clean)
        if cache.clock is not None:
            cache.clock.advance(fast_total * len(clean))
        for i in dirty:
            es = self.esets[i]
            self._sync_order(i)
            total = 0
            for j in es.order:
                total += cache.access(es.members[j], self.asid)[1]
            out[i] = total
            cv[i] = ver[es.target_set]
        return out

    def probe_latencies(self) -> np.ndarray:
        lat = self._probe_raw()
        g = self.cache.geometry
        if self.jitter:
            lat = lat + self.rng.normal(0.0, self.jitter, size=lat.shape)
        if self.p_noise:
            lat = lat + (self.rng.random(lat.shape) < self.p_noise) * (g.miss_latency - g.hit_latency)
        return lat

    def probe(self) -> np.ndarray:
        """Hot/cold classification for every monitored set."""
        return self.probe_latencies() > self.threshold

    def probe_traces(self, groups: int = TABLE_LINES) -> list[CacheTrace]:
        lat = self.probe_latencies()
        hot = lat > self.threshold
        return [CacheTrace(lat[i:i + groups], hot[i:i + groups]) for i in range(0, len(lat), groups)]

    def calibrate_threshold(self, samples: int = 64) -> float:
        """Midpoint between the measured all-hit and one-miss probe modes."""
        g = self.cache.geometry
        es = self.esets[0]
        saved_noise, self.p_noise = self.p_noise, 0.0
        single = PrimeProbe(self.cache, [es], self.rng, self.asid, self.jitter, 0.0, threshold=0)
        single.prime()
        hits, misses = [], []
        intruder = es.members[0] + g.sets * g.line_size * 4099
        for k in range(samples):
            hits.append(single.probe_latencies()[0])
            self.cache.access(intruder + k * g.sets * g.line_size, 0xFFFF)
            misses.append(single.probe_latencies()[0])
        single._sync_order(0)
        self.p_noise = saved_noise
        self.threshold = (float(np.median(hits)) + float(np.median(misses))) / 2
        self.prime()
        return self.threshold


def ooo_candidates(program: GuestProgram, retired_index: int, window: int, lookahead: int = 256) -> list[int]:
    """Indices of the not-yet-retired loads an out-of-order core may already run.

    Follows the instructions after ``retired_index`` and collects up to
    ``window`` loads from the same table, stopping at the first fence.
    """
    if window <= 0 or retired_index < 0:
        return []
    instrs = program.instructions
    table = instrs[retired_index].table
    if table is None:
        return []
    out = []
    end = min(len(instrs), retired_index + 1 + lookahead)
    for k in range(retired_index + 1, end):
        ins = instrs[k]
        if ins.op is Op.FENCE:
            break
        if ins.table == table and ins.op is Op.LOAD:
            out.append(k)
            if len(out) >= window:
                break
    return out


def inject_ooo_noise(vm, retired_index: int, window: int, p_ooo: float, rng: np.random.Generator,
                     cache: Cache, asid: int = VM_ASID, c_bit: bool = True, lookahead: int = 256) -> list[int]:
    """Touch the cache lines of speculatively executed future table loads."""
    touched = []
    for k in ooo_candidates(vm.program, retired_index, window, lookahead):
        if p_ooo < 1.0 and rng.random() >= p_ooo:
            continue
        for addr in vm.program.instructions[k].mem:
            paddr = vm.peek_translate(addr)
            if paddr is None:
                continue
            clock, cache.clock = cache.clock, None
            cache.access(paddr, asid, c_bit)
            cache.clock = clock
            touched.append(paddr)
    return touched


def write_traces_csv(path, traces: Sequence[CacheTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["access"] + [f"set{i}" for i in range(TABLE_LINES)] + ["truth"])
        for n, t in enumerate(traces):
            w.writerow([n] + [int(x) for x in t.hot] + ["" if t.truth is None else t.truth])


def read_traces_csv(path) -> list[CacheTrace]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            hot = np.array([int(row[f"set{i}"]) for i in range(TABLE_LINES)], dtype=bool)
            truth = int(row["truth"]) if row.get("truth") not in (None, "") else None
            out.append(CacheTrace(hot.astype(float), hot, truth))
    return out
