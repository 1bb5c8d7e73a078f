"""Attacker-side assembly: machine setup, event-driven trace collection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cache import (
    HOST_ASID,
    TABLE_LINES,
    Cache,
    CacheGeometry,
    PageAllocator,
    PrimeProbe,
    build_eviction_set,
)
from .channel import DirectChannel, Event, EventKind
from .crypto.aes import DEC_TABLES, ENC_TABLES, aes128_expand_key, ttable_decrypt, ttable_encrypt
from .crypto.xts import XtsCipher
from .guest import PAGE_SHIFT, Access, Clock, GuestProgram, GuestVM, TimingConfig
from .pftrack import FingerprintMatcher, PageFaultEvent
from .stepper import StepEvent, Stepper, StepperKnobs, Supervisor
from .victim import (
    AES_DECRYPT_PAGE,
    AES_DECRYPT_START,
    AES_ENCRYPT_PAGE,
    AES_ENCRYPT_START,
    XTS_FINGERPRINT,
    FunctionManifest,
    KernelLayout,
    LoadTruth,
    XtsRequest,
    _aes_function,
    _Builder,
    compile_xts_requests,
    function_manifest,
)

ROUND_TABLES = {"encrypt": ENC_TABLES, "decrypt": DEC_TABLES}
TABLE_PAGE = {"encrypt": "enc", "decrypt": "dec"}
ACCESSES_PER_TABLE = 36  # rounds 1..9, four lookups per table per round


@dataclass
class NoiseProfile:
    ooo_window: int = 4
    p_ooo: float = 1.0
    p_noise: float = 0.02
    probe_jitter: float = 2.0


@dataclass
class Machine:
    """A guest with its cache, stepper and a host page allocator for eviction sets."""

    layout: KernelLayout
    program: GuestProgram
    rng: np.random.Generator
    knobs: StepperKnobs = field(default_factory=StepperKnobs)
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    geometry: CacheGeometry = field(default_factory=CacheGeometry)
    timing: TimingConfig = field(default_factory=TimingConfig)

    def __post_init__(self):
        self.clock = Clock()
        self.cache = Cache(self.geometry, self.clock)
        self.vm = GuestVM(self.program, self.layout.page_entries(), self.timing,
                          memory=self.cache.guest_port(), clock=self.clock)
        self.stepper = Stepper(self.vm, self.rng, self.knobs, self.cache,
                               ooo_window=self.noise.ooo_window, p_ooo=self.noise.p_ooo)
        self.allocator = PageAllocator(self.rng)
        self.allocator.reserve(self.layout.hpa.values())

    def probe_for_page(self, gpa_page: int) -> PrimeProbe:
        """Eviction sets for every line of a guest page, in line order."""
        hpa = self.vm.pages[gpa_page].hpa << PAGE_SHIFT
        g = self.geometry
        lines = (1 << PAGE_SHIFT) // g.line_size
        esets = [build_eviction_set(self.cache, g.set_index(hpa + g.line_size * l), self.allocator)
                 for l in range(lines)]
        pp = PrimeProbe(self.cache, esets, self.rng, HOST_ASID, self.noise.probe_jitter, self.noise.p_noise)
        pp.calibrate_threshold()
        return pp


@dataclass
class TraceMeasurement:
    request: int
    direction: str
    round: int
    table: str
    position: int
    seq: int
    hot: np.ndarray
    truth: Optional[int] = None


def _table_seq(manifest: FunctionManifest) -> dict[int, int]:
    """ordinal -> access number among the loads of the same table."""
    counts: dict[str, int] = {}
    out = {}
    for a in manifest.accesses:
        out[a.ordinal] = counts.get(a.table, 0)
        counts[a.table] = out[a.ordinal] + 1
    return out


class XtsTraceController:
    """Controller reacting to page-fault and step events.

    Follows the fingerprint one page at a time, single-steps the two cipher
    functions, locates each lookup table once by the fault-sacrifice trick
    and records one cache trace per stepped table lookup.
    """

    def __init__(self, machine: Machine, supervisor: Supervisor, fenced: bool = False,
                 truth: Optional[dict[int, LoadTruth]] = None):
        self.machine = machine
        self.supervisor = supervisor
        self.layout = machine.layout
        self.matcher = FingerprintMatcher(XTS_FINGERPRINT, machine.layout.text_base)
        self.manifests = {d: function_manifest(d, fenced) for d in ("encrypt", "decrypt")}
        self.by_ord = {d: m.by_ordinal() for d, m in self.manifests.items()}
        self.seq = {d: _table_seq(m) for d, m in self.manifests.items()}
        self.first_access = {d: m.accesses[0].ordinal for d, m in self.manifests.items()}
        self.truth = truth or {}
        self.request = -1
        self.active: Optional[str] = None
        self.ordinal = 0
        self.located: dict[str, int] = {}
        self.locating: Optional[dict] = None
        self.measurements: list[TraceMeasurement] = []
        self.dropped_multi = 0
        self.sacrificed = 0
        self.zero_steps = 0
        self.step_events = 0
        self.fault_events = 0
        self.matches = 0

    def arm(self, channel) -> None:
        channel.submit_config(commands=[("track", [self.matcher.expected_gpa], "execute")])

    def __call__(self, channel, event: Event) -> None:
        if event.kind is EventKind.PAGE_FAULT:
            self.fault_events += 1
            self._on_fault(channel, event.payload)
        else:
            self.step_events += 1
            self._on_step(channel, event.payload)
        channel.ack_event(event.sequence)

    def _on_fault(self, ch, pf: PageFaultEvent) -> None:
        if pf.step is not None and self.active:
            self.ordinal += pf.step.step_size
        if self.locating is not None and pf.access is not Access.EXECUTE:
            self.locating["last"] = pf.gpa
            self.locating["pending"].discard(pf.gpa)
            ch.submit_config(commands=[("untrack", pf.gpa)])
            return
        ms = self.matcher.on_fault(pf.gpa)
        if ms is None:
            return
        cmds = [("untrack", pf.gpa), ("track", [self.matcher.expected_gpa], "execute")]
        fields = {}
        if ms.position == 0:
            self.request += 1
        if ms.completed:
            self.matches += 1
        if ms.position in (2, 5):
            self.active = "encrypt" if ms.position == 2 else "decrypt"
            self.ordinal = 0
            fields["stepping"] = True
            if self.active in self.located:
                fields["do_cache_attack"] = True
                cmds.append(("monitor", self.active))
            else:
                fields["do_cache_attack"] = False
                cmds.append(("monitor", None))
        ch.submit_config(commands=cmds, **fields)

    def _finish_locate(self, ch) -> None:
        d = self.active
        page = self.locating["last"]
        cmds = [("untrack", g) for g in sorted(self.locating["pending"])]
        self.locating = None
        self.located[d] = page
        self.supervisor.probes[d] = self.machine.probe_for_page(page)
        cmds.append(("monitor", d))
        self.sacrificed += 1
        ch.submit_config(commands=cmds, do_cache_attack=True)

    def _on_step(self, ch, se: StepEvent) -> None:
        d = self.active
        if d is None:
            return
        if se.step_size == 0:
            self.zero_steps += 1
        if self.locating is not None:
            if se.step_size >= 1:
                self._finish_locate(ch)
        elif se.step_size == 1:
            acc = self.by_ord[d].get(self.ordinal)
            if acc is not None and se.cache_traces is not None and acc.table in ROUND_TABLES[d]:
                t = ROUND_TABLES[d].index(acc.table)
                tr = se.cache_traces[t]
                truth = self.truth.get(se.indices.start)
                self.measurements.append(TraceMeasurement(
                    self.request, d, acc.round, acc.table, acc.position, self.seq[d][self.ordinal],
                    tr.hot.copy(), None if truth is None else truth.index >> 4))
        elif se.step_size > 1:
            self.dropped_multi += sum(1 for o in range(self.ordinal, self.ordinal + se.step_size)
                                      if o in self.by_ord[d])
        self.ordinal += se.step_size
        if d not in self.located and self.locating is None and self.ordinal == self.first_access[d]:
            pages = set(self.layout.data_pages())
            self.locating = {"last": None, "pending": set(pages)}
            ch.submit_config(commands=[("track", sorted(pages), "access")])
        if self.ordinal >= self.manifests[d].length:
            self.active = None
            ch.submit_config(commands=[("monitor", None)], stepping=False, do_cache_attack=False)


@dataclass
class AttackTraces:
    measurements: list[TraceMeasurement]
    sectors: list[int]
    ciphertexts: list[bytes]
    located: dict[str, int]
    stats: dict


def collect_xts_traces(requests: Sequence[XtsRequest], cipher: XtsCipher, rng: np.random.Generator,
                       knobs: Optional[StepperKnobs] = None, noise: Optional[NoiseProfile] = None,
                       interlude: int = 2, fenced: bool = False, geometry: Optional[CacheGeometry] = None,
                       timing: Optional[TimingConfig] = None) -> tuple[AttackTraces, Machine]:
    """Run the guest's XTS reads under the event-driven attack and gather traces."""
    layout = KernelLayout.random(rng)
    vp = compile_xts_requests(requests, cipher, layout, fenced=fenced, interlude=interlude, rng=rng)
    machine = Machine(layout, vp.program, rng, knobs or StepperKnobs(), noise or NoiseProfile(),
                      geometry or CacheGeometry(), timing or TimingConfig())
    machine.vm.memory = machine.cache.guest_port()
    holder: dict = {}
    channel = DirectChannel(lambda ch, ev: holder["ctl"](ch, ev))
    sup = Supervisor(machine.stepper, channel)
    ctl = XtsTraceController(machine, sup, fenced, vp.truth)
    holder["ctl"] = ctl
    ctl.arm(channel)
    sup.run()
    stats = {
        "requests": len(requests),
        "matches": ctl.matches,
        "measurements": len(ctl.measurements),
        "dropped_multi": ctl.dropped_multi,
        "sacrificed": ctl.sacrificed,
        "zero_steps": ctl.zero_steps,
        "step_events": ctl.step_events,
        "fault_events": ctl.fault_events,
        "located_ok": {d: ctl.located.get(d) == layout.table_page(ROUND_TABLES[d][0]) for d in ROUND_TABLES},
    }
    return AttackTraces(ctl.measurements, [r.sector for r in requests], [r.ciphertext for r in requests],
                        dict(ctl.located), stats), machine


@dataclass
class CipherTraces:
    """Per-operation trace sequences of one lookup table.

    ``hot``: (ops, 36, 16) bool; ``labels``: (ops, 36) true line or -1 if the
    access produced no usable step; ``inputs``: (ops, 16) block inputs.
    """

    direction: str
    table: str
    hot: np.ndarray
    labels: np.ndarray


def collect_cipher_traces(n_ops: int, rng: np.random.Generator, direction: str = "encrypt",
                          knobs: Optional[StepperKnobs] = None, noise: Optional[NoiseProfile] = None,
                          fenced: bool = False, key: Optional[bytes] = None,
                          geometry: Optional[CacheGeometry] = None, timing: Optional[TimingConfig] = None):
    """Profile run: step back-to-back block operations and keep per-table traces.

    Returns ``(traces_by_table, inputs, key)``.
    """
    layout = KernelLayout.random(rng)
    key = key if key is not None else bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    sched = aes128_expand_key(key)
    inputs = rng.integers(0, 256, (n_ops, 16), dtype=np.uint8)
    b = _Builder(layout)
    truth: dict[int, LoadTruth] = {}
    page, start = (AES_ENCRYPT_PAGE, AES_ENCRYPT_START) if direction == "encrypt" else (AES_DECRYPT_PAGE, AES_DECRYPT_START)
    for j in range(n_ops):
        blk = bytes(inputs[j])
        script = (ttable_encrypt(blk, sched) if direction == "encrypt" else ttable_decrypt(blk, sched))[1]
        instrs, info = _aes_function(direction, script, layout, 0, fenced)
        first = b.place(page, start, instrs)
        for i, m in enumerate(info):
            if m is not None:
                truth[first + i] = LoadTruth(j, direction, *m)
    program = GuestProgram(b.instrs, b.addrs)
    k = (knobs or StepperKnobs()).replace(do_cache_attack=True)
    machine = Machine(layout, program, rng, k, noise or NoiseProfile(), geometry or CacheGeometry(),
                      timing or TimingConfig())
    tables = ROUND_TABLES[direction]
    pp = machine.probe_for_page(layout.table_page(tables[0]))
    machine.stepper.prime_probe = pp
    pp.prime()
    manifest = function_manifest(direction, fenced)
    seq = _table_seq(manifest)
    starts = {}
    for idx, t in truth.items():
        starts.setdefault(t.request, idx)
    hot = np.zeros((len(tables), n_ops, ACCESSES_PER_TABLE, TABLE_LINES), dtype=bool)
    labels = np.full((len(tables), n_ops, ACCESSES_PER_TABLE), -1, dtype=np.int16)
    func_start = {j: s - manifest.accesses[0].ordinal for j, s in starts.items()}
    stepper = machine.stepper
    vm = machine.vm
    while not vm.done:
        ev = stepper.run_step()
        if ev.step_size != 1:
            continue
        idx = ev.indices.start
        t = truth.get(idx)
        if t is None or t.round > 9:
            continue
        ti = tables.index(t.table)
        s = seq[idx - func_start[t.request]]
        hot[ti, t.request, s] = ev.cache_traces[ti].hot
        labels[ti, t.request, s] = t.index >> 4
    out = {name: CipherTraces(direction, name, hot[i], labels[i]) for i, name in enumerate(tables)}
    return out, inputs, key
