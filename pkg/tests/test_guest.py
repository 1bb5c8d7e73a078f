import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvmstep.guest import (
    DIV_DIVISOR,
    Access,
    Fault,
    GuestProgram,
    GuestVM,
    Instruction,
    Op,
    TimingConfig,
    Translation,
    div_latency,
    identity_pages,
    parse_program,
    quotient_bits,
)

T = TimingConfig()
CODE = 0x10
DATA = 0x20


def make_vm(text: str, **bits) -> GuestVM:
    prog = parse_program(text, code_base=CODE << 12)
    return GuestVM(prog, identity_pages([CODE, DATA], 0x1000, **bits))


def test_warm_translation_costs_tlb_hit():
    vm = make_vm("nop")
    vm.translate(DATA << 12, Access.READ)
    tr = vm.translate((DATA << 12) + 8, Access.READ)
    assert tr == Translation(((DATA + 0x1000) << 12) + 8, T.tlb_hit)


def test_walk_after_flush_sets_accessed_bit():
    vm = make_vm("nop")
    vm.translate(DATA << 12, Access.READ)
    vm.flush_tlb()
    assert len(vm.tlb) == 0
    tr = vm.translate(DATA << 12, Access.READ)
    assert tr.latency == T.tlb_hit + T.page_walk
    assert vm.pages[DATA].accessed


def test_first_walk_pays_a_bit_once():
    vm = make_vm("nop")
    assert vm.translate(DATA << 12, Access.READ).latency == T.tlb_hit + T.page_walk + T.abit_set
    vm.flush_tlb()
    assert vm.translate(DATA << 12, Access.READ).latency == T.tlb_hit + T.page_walk
    vm.reset_accessed_bit(DATA)
    vm.reset_accessed_bit(DATA)  # idempotent
    assert not vm.pages[DATA].accessed
    vm.flush_tlb()
    assert vm.translate(DATA << 12, Access.READ).latency == T.tlb_hit + T.page_walk + T.abit_set


def test_not_present_faults():
    vm = make_vm("nop")
    vm.set_permissions(DATA, present=False)
    assert vm.translate(DATA << 12, Access.READ) == Fault(DATA, Access.READ, -1)


def test_nop_on_warm_page_costs_base_latency():
    vm = make_vm("nop\nnop")
    vm.step_instruction()
    rec = vm.step_instruction()
    assert rec.retire_time - rec.issue_time == 1


def test_cold_load_pays_two_walks():
    vm = make_vm(f"load mem={DATA << 12:x}")
    for p in vm.pages.values():
        p.accessed = True
    rec = vm.step_instruction()
    assert rec.walk_penalties == 2 * T.page_walk
    assert rec.retire_time - rec.issue_time == 2 * (T.tlb_hit + T.page_walk) + 4


def test_execute_on_nx_page_faults_without_advancing():
    vm = make_vm("nop", no_execute=True)
    rec = vm.step_instruction()
    assert rec.faulted == Fault(CODE, Access.EXECUTE, 0)
    assert vm.cursor == 0 and vm.retired == 0


def test_permission_change_invalidates_tlb():
    vm = make_vm("nop")
    vm.translate(DATA << 12, Access.READ)
    vm.set_permissions(DATA, writable=False)
    assert vm.tlb.lookup(DATA) is None


def test_fence_rejects_memory_operands():
    with pytest.raises(ValueError):
        Instruction.make(Op.FENCE, mem=[0x1000])
    with pytest.raises(ValueError):
        Instruction.make(Op.NOP, latency=0)


def test_program_layout_must_cover_instructions():
    with pytest.raises(ValueError):
        GuestProgram([Instruction.make(Op.NOP)], [])


def test_parse_program_fields():
    prog = parse_program("load mem=1000,2000 table=t0  # comment\n\ndiv div=ff\nadd lat=3")
    assert prog.instructions[0].mem == (0x1000, 0x2000)
    assert prog.instructions[0].table == "t0"
    assert prog.instructions[1].meta == 0xFF
    assert prog.instructions[2].latency == 3
    with pytest.raises(ValueError, match="line 1"):
        parse_program("nop bogus=1")


def test_unmapped_page_is_rejected():
    vm = make_vm("nop")
    with pytest.raises(ValueError):
        vm.translate(0x999 << 12, Access.READ)


def test_div_latency_grows_with_quotient_bits():
    assert div_latency(5) == 8
    assert div_latency(DIV_DIVISOR * ((1 << 64) - 1)) == 8 + 8  # ceil(64 / 9)
    assert quotient_bits(DIV_DIVISOR * 3) == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["nop", "add", "mul", f"load mem={DATA << 12:x}", "fence"]), min_size=1, max_size=40),
       st.lists(st.booleans(), min_size=40, max_size=40))
def test_retire_times_strictly_increase(ops, flushes):
    vm = make_vm("\n".join(ops))
    last = -1
    i = 0
    while not vm.done:
        if flushes[i % 40]:
            vm.flush_tlb()
        rec = vm.step_instruction()
        assert rec.retire_time > rec.issue_time >= last
        last = rec.retire_time
        i += 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([CODE, DATA]), st.booleans()), max_size=30))
def test_translation_is_deterministic(seq):
    a, b = make_vm("nop"), make_vm("nop")
    for page, flush in seq:
        if flush:
            a.flush_tlb()
            b.flush_tlb()
        assert a.translate(page << 12, Access.READ) == b.translate(page << 12, Access.READ)
