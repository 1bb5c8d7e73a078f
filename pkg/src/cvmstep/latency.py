"""Interrupt-latency measurements over single-stepped instruction slides."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .guest import DIV_DIVISOR, GuestProgram, GuestVM, Instruction, Op, TimingConfig, identity_pages
from .stepper import Stepper, StepperKnobs, calibrate_timer

CODE_BASE = 0x100000

# significant quotient bits per dividend profile (divisor fixed at 2**64 - 1)
DIV_PROFILES = {"div64-0": 0, "div64-1": 16, "div64-2": 40, "div64-3": 64}


class CalibrationMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class LatencySample:
    instr_class: str
    operand: Optional[int]
    latency: int
    step_size: int


def profile_dividend(bits: int, rng: np.random.Generator, divisor: int = DIV_DIVISOR) -> int:
    """A 128-bit dividend whose quotient by ``divisor`` has exactly ``bits`` significant bits."""
    rem = int(rng.integers(0, 1 << 62)) % divisor
    if bits == 0:
        return rem
    q = (1 << (bits - 1)) | (int.from_bytes(rng.bytes(8), "little") & ((1 << (bits - 1)) - 1))
    return q * divisor + rem


def slide_program(instr_class: str, n: int, rng: Optional[np.random.Generator] = None,
                  div_bits: Optional[int] = None) -> tuple[GuestProgram, list[Optional[int]]]:
    op = Op(instr_class)
    instrs, operands = [], []
    for _ in range(n):
        meta = None
        if op is Op.DIV:
            meta = profile_dividend(div_bits or 0, rng or np.random.default_rng(0))
        instrs.append(Instruction.make(op, meta=meta))
        operands.append(meta)
    return GuestProgram(instrs, [CODE_BASE + 4 * i for i in range(n)]), operands


@dataclass
class SlideResult:
    instr_class: str
    raw: list[LatencySample] = field(default_factory=list)

    @property
    def samples(self) -> list[LatencySample]:
        return [s for s in self.raw if s.step_size == 1]

    @property
    def latencies(self) -> np.ndarray:
        return np.array([s.latency for s in self.samples], dtype=np.int64)

    def counts(self) -> dict:
        sizes = [s.step_size for s in self.raw]
        return {"zero": sizes.count(0), "single": sizes.count(1), "multi": sum(1 for z in sizes if z > 1)}


@dataclass
class LatencyBench:
    """Single-steps instruction slides and records per-step latencies."""

    rng: np.random.Generator
    knobs: StepperKnobs = field(default_factory=StepperKnobs)
    timing: TimingConfig = field(default_factory=TimingConfig)
    timer: Optional[int] = None

    def _stepper(self, program: GuestProgram) -> Stepper:
        pages = identity_pages(sorted({a >> 12 for a in program.code_layout}))
        vm = GuestVM(program, pages, self.timing)
        return Stepper(vm, self.rng, self.knobs)

    def calibrate(self, n: int = 4000) -> int:
        def factory():
            return self._stepper(slide_program("nop", n)[0])

        self.timer, _ = calibrate_timer(factory, self.knobs)
        return self.timer

    def _knobs(self) -> StepperKnobs:
        if self.timer is None:
            raise CalibrationMissing("calibrate the timer before measuring")
        return self.knobs.replace(timer_value=self.timer)

    def run_slide(self, instr_class: str, n: int = 1000, reps: int = 100,
                  div_bits: Optional[int] = None, label: Optional[str] = None) -> SlideResult:
        """Each rep steps a fresh ``n``-instruction slide to completion."""
        knobs = self._knobs()
        res = SlideResult(label or instr_class)
        for _ in range(reps):
            program, operands = slide_program(instr_class, n, self.rng, div_bits)
            st = self._stepper(program)
            vm = st.vm
            limit = 3 * n
            events = 0
            while not vm.done and events < limit:
                ev = st.run_step(knobs)
                events += 1
                op = operands[ev.indices.start] if ev.step_size >= 1 else None
                res.raw.append(LatencySample(res.instr_class, op, ev.latency, ev.step_size))
            if not vm.done:
                break
        if not res.samples:
            warnings.warn(f"{instr_class}: no single-step samples (counts {res.counts()})", RuntimeWarning)
        return res

    def zero_step_latencies(self, count: int = 1000) -> np.ndarray:
        """Latencies of steps forced to zero by a timer below the entry cost."""
        knobs = self.knobs.replace(timer_value=1)
        st = self._stepper(slide_program("nop", 1)[0])
        out = []
        for _ in range(count):
            ev = st.run_step(knobs)
            if ev.step_size != 0:
                raise RuntimeError("forced zero-step retired an instruction")
            out.append(ev.latency)
        return np.array(out, dtype=np.int64)

    def estimate_base_latency(self, slide: SlideResult, zero: np.ndarray) -> float:
        """Median single-step latency minus the zero-step overhead and the code-page walk.

        The stepper flushes the TLB before each entry, so every single-step
        pays one translation for the instruction fetch.
        """
        walk = self.timing.page_walk if self.knobs.flush_tlb else self.timing.tlb_hit
        return float(np.median(slide.latencies) - np.median(zero) - walk)


@dataclass
class Summary:
    n: int
    median: float
    q1: float
    q3: float
    mean: float
    std: float
    hist_counts: list[int]
    hist_edges: list[float]

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def modes(self, min_share: float = 0.05) -> int:
        """Number of separated histogram peaks.

        A peak is a run of bins holding at least ``min_share`` of the
        tallest bin, so sparse tail outliers do not count as modes.
        """
        floor = min_share * max(self.hist_counts, default=0)
        runs, inside = 0, False
        for c in self.hist_counts:
            high = c > 0 and c >= floor
            if high and not inside:
                runs += 1
            inside = high
        return runs


def summarize(samples, bins: int = 64) -> Summary:
    x = np.asarray([s.latency if isinstance(s, LatencySample) else s for s in samples], dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot summarize an empty sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        hi = lo + 1
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return Summary(int(x.size), float(med), float(q1), float(q3), float(x.mean()), float(x.std()),
                   counts.tolist(), edges.tolist())


@dataclass
class Classification:
    label: str
    confidence: float
    tie: bool = False
    runner_up: Optional[str] = None


def classify_instruction(samples, references: dict[str, Sequence[float]], rng: np.random.Generator,
                         permutations: int = 999) -> Classification:
    """Nearest-median label; confidence = 1 - permutation p-value against the runner-up.

    The permutation test asks whether the samples' median could as well
    come from the runner-up reference distribution.
    """
    x = np.asarray([s.latency if isinstance(s, LatencySample) else s for s in samples], dtype=np.float64)
    if x.size == 0:
        raise ValueError("no samples to classify")
    refs = {k: np.asarray(v, dtype=np.float64) for k, v in references.items()}
    med = float(np.median(x))
    dist = sorted((abs(med - float(np.median(r))), k) for k, r in refs.items())
    label = dist[0][1]
    if len(dist) == 1:
        return Classification(label, 1.0)
    if dist[0][0] == dist[1][0]:
        return Classification(label, 0.0, tie=True, runner_up=dist[1][1])
    other = refs[dist[1][1]]
    obs = abs(med - float(np.median(other)))
    pool = np.concatenate([x, other])
    n = x.size
    hits = 0
    for _ in range(permutations):
        perm = rng.permutation(pool)
        if abs(np.median(perm[:n]) - np.median(perm[n:])) >= obs:
            hits += 1
    p = (hits + 1) / (permutations + 1)
    return Classification(label, 1.0 - p, runner_up=dist[1][1])


def div_operand_experiment(bench: LatencyBench, profiles: Optional[dict[str, int]] = None,
                           n: int = 200, reps: int = 5) -> dict[str, SlideResult]:
    """One slide per dividend profile with the divisor fixed at 2**64 - 1."""
    profiles = profiles if profiles is not None else DIV_PROFILES
    return {name: bench.run_slide("div", n, reps, div_bits=bits, label=name) for name, bits in profiles.items()}


def expected_div_extra(bits: int) -> int:
    return math.ceil(bits / 9)


def write_samples_csv(path, results: Iterable[SlideResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "operand", "latency", "step-size"])
        for res in results:
            for s in res.raw:
                w.writerow([s.instr_class, "" if s.operand is None else hex(s.operand), s.latency, s.step_size])


def summary_json(results: dict[str, SlideResult]) -> str:
    out = {}
    for name, res in results.items():
        d = {"counts": res.counts()}
        if res.samples:
            s = summarize(res.samples)
            d.update({k: v for k, v in asdict(s).items() if not k.startswith("hist")})
        out[name] = d
    return json.dumps(out, indent=2, sort_keys=True)
