import pytest

from hardtrace.analysis import RegPoint, TracePlan, conservative_points, plan_trace_points
from hardtrace.corpus import random_inputs
from hardtrace.isa import TirError, parse_program
from hardtrace.rewriter import TracePointMap, conservative_plan, rewrite
from hardtrace.taintgraph import parse_taint_config
from hardtrace.tracer import TraceConfig, execute


def records(rw):
    return [(f.name, i, ins) for f in rw.functions.values() for i, ins in enumerate(f.instrs)
            if ins.op == "record"]


def test_toy_rewrite(toy_case):
    p, cfg, _ = toy_case
    rw, tmap = rewrite(p, plan_trace_points(p, cfg))
    f = rw["main"]
    assert f.instrs[0].origin == ("main", 0)
    assert str(f.instrs[1]).startswith("record r0")
    for label in ("L3", "L6"):
        assert f.instrs[f.resolve(label)].is_blockmark
    assert [s.describe(p) for s in tmap.sites] == ["r0@L1", "block L3", "block L6"]


def test_empty_plan_is_identity(toy_case):
    p, _, _ = toy_case
    rw, tmap = rewrite(p, TracePlan())
    assert rw == p
    assert len(tmap) == 0


def test_consolidation(toy_case):
    p, _, _ = toy_case
    f = p["main"]
    l3 = f.resolve("L3")
    plan = TracePlan(registers={RegPoint("main", l3, 0, before=True)}, blocks={("main", l3)})
    rw, tmap = rewrite(p, plan)
    in_block = [r for r in records(rw) if r[2].origin is None]
    assert len(in_block) == 1 and len(tmap) == 1
    assert tmap.sites[0].kind == "reg"


@pytest.mark.parametrize("plan", [
    TracePlan(registers={RegPoint("main", 99, 0)}),
    TracePlan(blocks={("main", 4)}),
    TracePlan(blocks={("ghost", 0)}),
])
def test_mismatched_plan(toy_case, plan):
    p, _, _ = toy_case
    with pytest.raises(TirError, match="trace plan"):
        rewrite(p, plan)


def test_mismatch_names_label(toy_case):
    p, _, _ = toy_case
    with pytest.raises(TirError, match="L4"):
        rewrite(p, TracePlan(blocks={("main", 4)}))


PREHEADER = """\
func main
    cmp r0, 0
    jeq H
    mov r2, 0
H:  load r1, [r3+0x1000]
    add r2, 1
    cmp r2, r5
    jle H
    halt
"""


def test_dummy_preheader():
    p = parse_program(PREHEADER)
    cfg = parse_taint_config("# tir-taint 1\nsink main@3 r1\ntaint 0x1000\n", p)
    plan = plan_trace_points(p, cfg)
    (d,) = plan.loop_directives.values()
    # the invariant base plus the induction variable and bound that fix the trip count
    assert d.kind == "full-once" and d.hoisted == (2, 3, 5)
    rw, tmap = rewrite(p, plan)
    f = rw["main"]
    pre = f.resolve("H.pre")
    assert f.instrs[pre].op == "record"
    assert [s.where for s in tmap.sites if s.kind == "reg"] == ["preheader"] * 3
    # both outside predecessors now reach the loop through the dummy block
    inputs = [(0, 0, 0, 0x3, 0, 9, 0, 0x8000), (1, 0, 0, 0x3, 0, 9, 0, 0x8000)]
    for regs in inputs:
        from hardtrace.tracer import MachineInput
        r = execute(rw, MachineInput(regs, {}), debug=True)
        regs_seen = [e for e in r.ground_truth if e[0] == "reg"]
        assert [v for _, _, v in regs_seen] == [0, 3, 9]


def test_map_is_bijection(small_corpus):
    for case in small_corpus:
        rw, tmap = rewrite(case.program, plan_trace_points(case.program, case.config))
        ids = [ins.site for _, _, ins in records(rw)]
        assert sorted(ids) == list(range(len(tmap)))
        for _, _, ins in records(rw):
            assert (tmap.sites[ins.site].kind == "reg") == bool(ins.operands)
        assert TracePointMap.loads(tmap.dumps()) == tmap


def test_rewrite_preserves_semantics(small_corpus):
    for k, case in enumerate(small_corpus):
        for plan in (plan_trace_points(case.program, case.config),
                     conservative_points(case.program, case.config)):
            rw, _ = rewrite(case.program, plan)
            for inp in random_inputs(k, 2):
                a = execute(case.program, inp, TraceConfig(mode="none")).state
                b = execute(rw, inp, TraceConfig(mode="none")).state
                assert a.regs == b.regs and a.memory == b.memory, case.name


def test_conservative_toy(toy_case):
    p, cfg, _ = toy_case
    d = conservative_plan(p, cfg).describe(p)
    assert d["registers"] == ["r0@L3", "r1@L5", "r1@L8"]
    assert d["blocks"] == ["L3", "L6"]


def test_conservative_without_memory_or_branches():
    p = parse_program("func main\n    mov r1, r0\n    add r1, 2\n    halt\n")
    cfg = parse_taint_config("# tir-taint 1\nsource main@0 r0\nsink main@1 r1\n", p)
    assert conservative_plan(p, cfg).static_count() == 0


def test_consolidated_block_is_inferable(small_corpus):
    # a planned block without its own mark still holds a record of some kind
    for case in small_corpus:
        plan = plan_trace_points(case.program, case.config)
        rw, _ = rewrite(case.program, plan)
        where = rw.origin_index()
        for fn, leader in plan.blocks:
            f = rw[fn]
            b = f.cfg[f.block_of[where[(fn, leader)][1]]]
            assert any(f.instrs[i].op == "record" for i in range(b.start, b.end)), case.name
