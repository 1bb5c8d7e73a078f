"""Synthetic Prime+Probe experiments: the alternating-access victim and zero-step purity."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attack import Machine, NoiseProfile
from .cache import VM_ASID
from .crypto.aes import ENC_TABLES
from .guest import GuestProgram, Instruction, Op
from .stepper import StepperKnobs
from .victim import AES_ENCRYPT_PAGE, KernelLayout, _Builder

# byte offsets the victim alternates between (lines 1 and 15 of a 16-line table)
ALTERNATING_OFFSETS = (64, 960)
TABLE = ENC_TABLES[0]


def alternating_program(layout: KernelLayout, accesses: int, fenced: bool) -> tuple[GuestProgram, dict[int, int]]:
    """Table loads alternating between two lines, optionally separated by fences.

    Returns the program and a map from instruction index to the accessed line.
    """
    base = layout.tables[TABLE]
    instrs, truth = [], {}
    for i in range(accesses):
        off = ALTERNATING_OFFSETS[i % 2]
        truth[len(instrs)] = off // 64
        instrs.append(Instruction.make(Op.LOAD, mem=[base + off], table=TABLE))
        if fenced:
            instrs.append(Instruction.make(Op.FENCE))
    b = _Builder(layout)
    b.place(AES_ENCRYPT_PAGE, 0, instrs)
    return GuestProgram(b.instrs, b.addrs), truth


@dataclass
class AlternatingResult:
    fenced: bool
    steps: int
    correct: int
    hot_counts: list[int]

    @property
    def accuracy(self) -> float:
        return self.correct / self.steps if self.steps else 0.0


def run_alternating(rng: np.random.Generator, fenced: bool, accesses: int = 400,
                    noise: Optional[NoiseProfile] = None, knobs: Optional[StepperKnobs] = None) -> AlternatingResult:
    """Single-step the victim, probe the table's sets and classify each access by threshold.

    An access counts as correctly classified when the accessed line's set
    is above the probe threshold and the other line's set is not.
    """
    layout = KernelLayout.random(rng)
    program, truth = alternating_program(layout, accesses, fenced)
    k = (knobs or StepperKnobs()).replace(do_cache_attack=True)
    m = Machine(layout, program, rng, k, noise or NoiseProfile())
    pp = m.probe_for_page(layout.table_page(TABLE))
    m.stepper.prime_probe = pp
    pp.prime()
    lines = [o // 64 for o in ALTERNATING_OFFSETS]
    steps = correct = 0
    hot_counts = []
    while not m.vm.done:
        ev = m.stepper.run_step()
        if ev.step_size != 1 or ev.indices.start not in truth:
            continue
        line = truth[ev.indices.start]
        other = lines[1] if line == lines[0] else lines[0]
        hot = ev.cache_traces[0].hot
        steps += 1
        hot_counts.append(int(hot.sum()))
        correct += bool(hot[line] and not hot[other])
    return AlternatingResult(fenced, steps, correct, hot_counts)


@dataclass
class ZeroStepResult:
    steps: int
    zero_steps: int
    vm_line_changes: int
    hot_sets: int
    accessed_bit_changes: int

    @property
    def pure(self) -> bool:
        return self.zero_steps == self.steps and not (self.vm_line_changes or self.hot_sets or self.accessed_bit_changes)


def zero_step_purity(rng: np.random.Generator, count: int = 1000) -> ZeroStepResult:
    """Force ``count`` zero-steps on the table victim and look for any guest-attributable trace.

    Probe noise is disabled so that every hot set would have to come from
    a guest access.
    """
    layout = KernelLayout.random(rng)
    program, _ = alternating_program(layout, 8, fenced=False)
    k = StepperKnobs(timer_value=1, do_cache_attack=True)
    m = Machine(layout, program, rng, k, NoiseProfile(p_noise=0.0, probe_jitter=0.0))
    pp = m.probe_for_page(layout.table_page(TABLE))
    m.stepper.prime_probe = pp
    pp.prime()
    before = sorted(m.cache.lines_owned_by(VM_ASID))
    bits = {g: e.accessed for g, e in m.vm.pages.items()}
    zero = hot = 0
    for _ in range(count):
        ev = m.stepper.run_step()
        zero += ev.step_size == 0
        hot += sum(int(t.hot.sum()) for t in ev.cache_traces)
    after = sorted(m.cache.lines_owned_by(VM_ASID))
    changed = len(set(before) ^ set(after))
    flips = sum(e.accessed != bits[g] for g, e in m.vm.pages.items())
    return ZeroStepResult(count, zero, changed, hot, flips)

