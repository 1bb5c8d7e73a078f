import numpy as np
import pytest

from cvmstep.crypto.xts import XtsCipher
from cvmstep.guest import Access, GuestVM, identity_pages, parse_program
from cvmstep.pftrack import (
    Fingerprint,
    FingerprintEntry,
    FingerprintMatcher,
    PageTracker,
    TrackMode,
    locate_table,
    match_fingerprint,
    run_fingerprint_capture,
)
from cvmstep.victim import XTS_FINGERPRINT, KernelLayout, XtsRequest, compile_xts_requests, control_workload

FAULT_OFFSETS = [0x65C, 0x64B, 0x65F, 0x660, 0x65B, 0x660, 0x661]


def victim_vm(n_requests, seed=0, interlude=0):
    rng = np.random.default_rng(seed)
    layout = KernelLayout.random(rng)
    reqs = [XtsRequest(int(s), rng.bytes(16)) for s in rng.integers(0, 1 << 20, n_requests)]
    vp = compile_xts_requests(reqs, XtsCipher(rng.bytes(32)), layout, interlude=interlude, rng=rng)
    return GuestVM(vp.program, layout.page_entries()), layout


def live_matches(vm, layout, fp=XTS_FINGERPRINT):
    """Track only the next expected page; count completed matches."""
    m = FingerprintMatcher(fp, layout.text_base)
    tr = PageTracker(vm)
    tr.track([m.expected_gpa], TrackMode.EXECUTE)
    faults = 0
    while not vm.done:
        vm.enter()
        recs = vm.run()
        if not recs or recs[-1].faulted is None:
            continue
        faults += 1
        gpa = recs[-1].faulted.gpa
        assert tr.is_tracked(gpa)
        m.on_fault(gpa)
        tr.untrack(gpa)
        tr.track([m.expected_gpa], TrackMode.EXECUTE)
    return m.matches, faults


def small_vm(text, pages=(0x10, 0x20, 0x21)):
    return GuestVM(parse_program(text, code_base=0x10000), identity_pages(pages))


def test_track_present_then_read_faults():
    vm = small_vm("load mem=20000")
    PageTracker(vm).track([0x20], TrackMode.ACCESS)
    rec = vm.step_instruction()
    assert rec.faulted.gpa == 0x20 and rec.faulted.access is Access.READ


def test_track_execute_leaves_data_reads_alone():
    vm = small_vm("load mem=20000\nnop")
    tr = PageTracker(vm)
    tr.track([0x20], TrackMode.EXECUTE)
    assert vm.step_instruction().faulted is None
    tr.track([0x10], TrackMode.EXECUTE)
    vm.enter()
    assert vm.step_instruction().faulted.access is Access.EXECUTE


def test_untrack_restores_access():
    vm = small_vm("store mem=20000")
    tr = PageTracker(vm)
    tr.track([0x20], TrackMode.WRITE)
    assert vm.step_instruction().faulted.access is Access.WRITE
    tr.untrack(0x20)
    assert vm.step_instruction().faulted is None
    assert vm.pages[0x20].writable


def test_track_unknown_page():
    with pytest.raises(ValueError):
        PageTracker(small_vm("nop")).track([0x99], TrackMode.ACCESS)


def test_capture_of_one_block_gives_fault_offsets():
    vm, layout = victim_vm(1)
    assert run_fingerprint_capture(vm, layout.text_base) == FAULT_OFFSETS


def test_capture_of_two_blocks_repeats_offsets():
    vm, layout = victim_vm(2)
    assert run_fingerprint_capture(vm, layout.text_base) == FAULT_OFFSETS * 2


def test_capture_of_empty_program():
    vm = small_vm("")
    assert run_fingerprint_capture(vm, 0x10, code_pages=[0x10]) == []


def test_offline_matching():
    fp = XTS_FINGERPRINT
    assert match_fingerprint(FAULT_OFFSETS, fp) == [6]
    noisy = [0x100, 0x65C, 0x200, 0x64B, 0x65F, 0x300, 0x660, 0x65B, 0x660, 0x400, 0x661]
    assert match_fingerprint(noisy, fp) == [10]
    assert match_fingerprint(FAULT_OFFSETS[:-1], fp) == []


def test_live_matcher_fires_once_per_block():
    vm, layout = victim_vm(5, seed=1, interlude=2)
    matches, _ = live_matches(vm, layout)
    assert matches == 5


def test_live_matcher_never_fires_on_control():
    rng = np.random.default_rng(3)
    layout = KernelLayout.random(rng)
    vm = GuestVM(control_workload(layout, rng, 400), layout.page_entries())
    matches, faults = live_matches(vm, layout)
    assert matches == 0 and faults > 0


def test_non_matching_fault_holds_state():
    fp = Fingerprint((FingerprintEntry(1, "marker"), FingerprintEntry(2, "payload")))
    m = FingerprintMatcher(fp, 0x100)
    assert m.on_fault(0x101).position == 0
    assert m.on_fault(0x105) is None and m.state == 1
    assert m.on_fault(0x102).completed


def test_fingerprint_file_round_trip():
    fp = Fingerprint.parse(XTS_FINGERPRINT.dump())
    assert fp == XTS_FINGERPRINT
    assert fp.offsets == FAULT_OFFSETS
    with pytest.raises(ValueError):
        Fingerprint.parse("0x10 bogus")
    with pytest.raises(ValueError):
        Fingerprint.parse("# only comments\n")


def test_locate_single_operand():
    vm = small_vm("load mem=20040")
    assert locate_table(vm, [0x20, 0x21]) == 0x20
    # the located instruction retires and every page is restored
    assert vm.cursor == 1 and all(p.present for p in vm.pages.values())


def test_locate_two_operands_returns_final_page():
    vm = small_vm("load mem=20000,21000")
    assert locate_table(vm, [0x20, 0x21]) == 0x21


def test_locate_without_data_access():
    with pytest.raises(ValueError):
        locate_table(small_vm("nop"), [0x20])


def test_locate_first_table_load_of_victim():
    vm, layout = victim_vm(1)
    prog = vm.program
    first = next(i for i, ins in enumerate(prog.instructions) if ins.table == "enc0")
    while vm.cursor < first:
        vm.step_instruction()
    assert locate_table(vm, layout.data_pages()) == layout.table_page("enc0")
