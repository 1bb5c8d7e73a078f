"""Timer-driven single-stepping of a GuestVM.

Timeline of one step: the host takes a timestamp, programs the timer and
enters the guest.  Entry costs ``E`` cycles, after which instructions
issue back to back.  The timer fires ``timer_value * tick_scale`` cycles
after the timestamp; every instruction that has issued by then retires,
so the step size is the number of issue times at or before the deadline.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .cache import Cache, CacheTrace, PrimeProbe, inject_ooo_noise
from .channel import ConfigChange, EventChannel, EventKind
from .guest import GuestVM
from .pftrack import PageFaultEvent, PageTracker, TrackMode


@dataclass(frozen=True)
class StepperKnobs:
    timer_value: int = 6
    tick_scale: int = 256
    flush_tlb: bool = True
    reset_a_bit: bool = False
    suppress_virtual_timer: bool = True
    countermeasure_min_cycles: Optional[int] = None
    countermeasure_max_instructions: int = 32
    do_cache_attack: bool = False
    entry_mean: float = 1500.0
    entry_stddev: float = 40.0
    exit_overhead: int = 800
    virtual_irq_probability: float = 0.05
    handler_length: int = 16

    def __post_init__(self):
        if self.timer_value <= 0:
            raise ValueError("timer value must be positive")
        if self.tick_scale < 1:
            raise ValueError("tick scale must be >= 1")

    def replace(self, **changes) -> "StepperKnobs":
        return dataclasses.replace(self, **changes)


KNOB_FIELDS = {f.name for f in dataclasses.fields(StepperKnobs)}


@dataclass
class StepEvent:
    step_size: int
    latency: int
    indices: range
    cache_traces: Optional[list[CacheTrace]] = None
    fault: Optional[PageFaultEvent] = None
    handler_instructions: int = 0
    retired_records: int = 0
    pre_timestamp: int = 0
    post_timestamp: int = 0


class Stepper:
    def __init__(self, vm: GuestVM, rng: np.random.Generator, knobs: Optional[StepperKnobs] = None,
                 cache: Optional[Cache] = None, prime_probe: Optional[PrimeProbe] = None,
                 ooo_window: int = 4, p_ooo: float = 1.0, ooo_lookahead: int = 256):
        self.vm = vm
        self.rng = rng
        self.knobs = knobs or StepperKnobs()
        self.cache = cache
        self.prime_probe = prime_probe
        self.ooo_window = ooo_window
        self.p_ooo = p_ooo
        self.ooo_lookahead = ooo_lookahead

    def measure_time(self) -> int:
        return self.vm.clock

    def _entry_cost(self, k: StepperKnobs) -> int:
        if k.entry_stddev <= 0:
            return max(1, int(round(k.entry_mean)))
        return max(1, int(round(self.rng.normal(k.entry_mean, k.entry_stddev))))

    def run_step(self, knobs: Optional[StepperKnobs] = None) -> StepEvent:
        k = knobs or self.knobs
        vm = self.vm
        pre = self.measure_time()
        if k.flush_tlb:
            vm.flush_tlb()
        if k.reset_a_bit:
            page = vm.next_code_page()
            if page is not None:
                vm.reset_accessed_bit(page)
        if not k.suppress_virtual_timer and self.rng.random() < k.virtual_irq_probability:
            vm.handler_pending += k.handler_length
        entry = pre + self._entry_cost(k)
        deadline = pre + k.timer_value * k.tick_scale
        counter_before = vm.retired
        start_cursor = vm.cursor
        vm.enter()
        vm.clock = entry
        records = []
        if k.countermeasure_min_cycles is not None and deadline < entry + k.countermeasure_min_cycles:
            budget = int(self.rng.integers(1, k.countermeasure_max_instructions + 1))
            while not vm.done and len(records) < budget:
                rec = vm.step_instruction()
                records.append(rec)
                if rec.faulted is not None:
                    break
        else:
            while not vm.done and vm.clock <= deadline:
                rec = vm.step_instruction()
                records.append(rec)
                if rec.faulted is not None:
                    break
        faulted = records[-1].faulted if records else None
        exit_time = vm.clock
        if faulted is None and records and vm.done and exit_time < deadline:
            exit_time = deadline
        vm.clock = exit_time + k.exit_overhead
        step_size = vm.retired - counter_before
        retired = [r for r in records if r.faulted is None]
        payload = [r for r in retired if not r.handler]
        if self.cache is not None and payload:
            inject_ooo_noise(vm, payload[-1].index, self.ooo_window, self.p_ooo, self.rng, self.cache,
                             lookahead=self.ooo_lookahead)
        post = vm.clock
        traces = None
        if k.do_cache_attack and self.prime_probe is not None:
            traces = self.prime_probe.probe_traces()
        fault = None
        if faulted is not None:
            fault = PageFaultEvent(faulted.gpa, faulted.access, faulted.index)
        return StepEvent(
            step_size=step_size,
            latency=post - pre,
            indices=range(start_cursor, vm.cursor),
            cache_traces=traces,
            fault=fault,
            handler_instructions=len(retired) - len(payload),
            retired_records=len(retired),
            pre_timestamp=pre,
            post_timestamp=post,
        )


@dataclass
class SlideStats:
    timer: int
    zero: int = 0
    single: int = 0
    multi: int = 0
    multi_total: int = 0
    events: int = 0

    @property
    def mean_multi(self) -> float:
        return self.multi_total / self.multi if self.multi else 0.0

    def row(self) -> dict:
        return {"timer": self.timer, "zero": self.zero, "single": self.single,
                "multi": self.multi, "mean-multi": round(self.mean_multi, 3)}


def run_slide(stepper: Stepper, knobs: StepperKnobs, max_events: Optional[int] = None) -> SlideStats:
    vm = stepper.vm
    limit = max_events if max_events is not None else 3 * max(1, len(vm.program))
    stats = SlideStats(knobs.timer_value)
    while not vm.done and stats.events < limit:
        ev = stepper.run_step(knobs)
        stats.events += 1
        if ev.fault is not None:
            raise RuntimeError("unexpected fault while stepping a slide")
        if ev.step_size == 0:
            stats.zero += 1
        elif ev.step_size == 1:
            stats.single += 1
        else:
            stats.multi += 1
            stats.multi_total += ev.step_size
    return stats


class CalibrationError(RuntimeError):
    pass


def calibrate_timer(stepper_factory: Callable[[], Stepper], knobs: StepperKnobs,
                    start: Optional[int] = None) -> tuple[int, list[dict]]:
    """Sweep the timer downward until only zero-steps remain.

    Returns the smallest swept value with at least one single-step (or,
    failing that, the smallest value that retired anything) plus one
    report row per candidate.
    """
    if start is None:
        bound = knobs.entry_mean + 10 * knobs.entry_stddev + 1000
        start = 2 * math.ceil(bound / knobs.tick_scale)
    rows = []
    best_single = None
    best_any = None
    for timer in range(start, 0, -1):
        st = run_slide(stepper_factory(), knobs.replace(timer_value=timer))
        rows.append(st.row())
        if st.single == 0 and st.multi == 0:
            break
        best_any = timer
        if st.single:
            best_single = timer
    chosen = best_single if best_single is not None else best_any
    if chosen is None:
        raise CalibrationError("no timer value retires any instruction")
    return chosen, rows


def write_calibration_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["timer", "zero", "single", "multi", "mean-multi"])
        w.writeheader()
        w.writerows(rows)


class Supervisor:
    """Host-side loop: runs the guest, publishes events, applies deferred config.

    In free-running mode the guest runs until a tracked page faults; in
    stepping mode every timer interrupt produces a step event.  Config
    fields are StepperKnobs names plus ``stepping``; commands are tuples
    ``("track", gpas, mode)``, ``("untrack", gpa)``, ``("monitor", name)``.
    """

    def __init__(self, stepper: Stepper, channel: EventChannel,
                 probes: Optional[dict[str, PrimeProbe]] = None, stepping: bool = False):
        self.stepper = stepper
        self.vm = stepper.vm
        self.channel = channel
        self.tracker = PageTracker(self.vm)
        self.probes = probes or {}
        self.stepping = stepping
        self.events = 0

    def apply(self, change: ConfigChange) -> None:
        for name, value in change.fields.items():
            if name == "stepping":
                self.stepping = bool(value)
            elif name in KNOB_FIELDS:
                self.stepper.knobs = self.stepper.knobs.replace(**{name: value})
            else:
                raise ValueError(f"unknown config field {name!r}")
        for cmd in change.commands:
            op = cmd[0]
            if op == "track":
                self.tracker.track(cmd[1], TrackMode(cmd[2]))
            elif op == "untrack":
                self.tracker.untrack(cmd[1])
            elif op == "untrack_all":
                self.tracker.untrack_all()
            elif op == "monitor":
                pp = self.probes[cmd[1]] if cmd[1] is not None else None
                self.stepper.prime_probe = pp
                if pp is not None:
                    pp.prime()
            else:
                raise ValueError(f"unknown command {op!r}")

    def resume_once(self):
        """Apply pending config, run the guest to the next event and publish it."""
        self.apply(self.channel.take_config())
        if self.vm.done:
            return None
        if self.stepping:
            ev = self.stepper.run_step()
            if ev.fault is not None:
                fault = dataclasses.replace(ev.fault, step=ev)
                out = self.channel.send_event(EventKind.PAGE_FAULT, fault)
            else:
                out = self.channel.send_event(EventKind.SINGLE_STEP, ev)
        else:
            k = self.stepper.knobs
            self.vm.advance(int(k.entry_mean))
            self.vm.enter()
            records = self.vm.run()
            self.vm.advance(k.exit_overhead)
            if not records or records[-1].faulted is None:
                return None
            f = records[-1].faulted
            out = self.channel.send_event(EventKind.PAGE_FAULT, PageFaultEvent(f.gpa, f.access, f.index))
        self.events += 1
        return out

    def run(self, max_events: Optional[int] = None) -> int:
        while not self.vm.done:
            if max_events is not None and self.events >= max_events:
                break
            if self.resume_once() is None and self.vm.done:
                break
        return self.events


def single_step_region(stepper: Stepper, channel: EventChannel,
                       until: Optional[Callable[[StepEvent], bool]] = None,
                       max_steps: Optional[int] = None) -> Iterator[StepEvent]:
    """Step, publish each event and block for its acknowledgment."""
    n = 0
    while not stepper.vm.done and (max_steps is None or n < max_steps):
        change = channel.take_config()
        if change:
            bad = set(change.fields) - KNOB_FIELDS
            if bad:
                raise ValueError(f"unknown knob(s) {sorted(bad)}")
            stepper.knobs = stepper.knobs.replace(**change.fields)
        ev = stepper.run_step()
        channel.send_event(EventKind.SINGLE_STEP, ev)
        n += 1
        yield ev
        if until is not None and until(ev):
            return
