import itertools
import random

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from hardtrace.analysis import (BOTTOM, LOOP_TYPES, ALL_REGS, MayTaint, RegPoint, build_vfg,
                                classify_loop, compute_taint_unchanged_blocks, conservative_points,
                                eliminate_functions, find_loops, identify_registers,
                                is_taint_unchanged, loop_flags, meet, mod_sets, plan_trace_points,
                                program_facts, run_mvsa, select_target_blocks)
from hardtrace.corpus import LOOP_SHAPES, MIXED, loop_shape, random_inputs, random_program
from hardtrace.isa import INTRINSICS, parse_program
from hardtrace.taintgraph import TaintConfig, parse_taint_config
from hardtrace.tracer import MachineInput, shadow_values

from helpers import first_hits, reachable_instrs


def vfg_for(p, cfg, name="main"):
    return build_vfg(p[name], p, program_facts(p, cfg))


# ---------------------------------------------------------------------------
# value-flow graph


def test_toy_vfg_component(toy_case):
    p, cfg, _ = toy_case
    f = p["main"]
    vfg = vfg_for(p, cfg)
    want = {("u", f.resolve("L1"), 0), ("u", f.resolve("L3"), 0),
            ("u", f.resolve("L5"), 1), ("u", f.resolve("L8"), 1)}
    comp = next(c for c in nx.weakly_connected_components(vfg.graph) if want & c)
    assert want <= comp
    for n in want - {("u", 0, 0)}:
        assert any(vfg.graph.edges[n, m]["kind"] == "a" for m in vfg.graph.successors(n))


def test_vfg_without_memory():
    p = parse_program("func main\n    mov r1, r0\n    add r1, 3\n    halt\n")
    assert build_vfg(p["main"], p).address_edges() == []


def brute_force_flow(f, mods):
    """Value edges into use nodes: the nearest earlier occurrence of the register on any path."""
    from hardtrace.analysis import _vfg_defs
    live = reachable_instrs(f)

    def occurs(i, r):
        ins = f.instrs[i]
        return r in ins.reg_uses() or r in [d for d, _ in _vfg_defs(ins, mods)]

    def after(j, r):
        ins = f.instrs[j]
        return ("d", j, r) if r in [d for d, _ in _vfg_defs(ins, mods)] else ("u", j, r)

    from helpers import instr_succs
    succ = instr_succs(f)
    out = set()
    for r in range(8):
        origins = [(("e", r), r, [0])] + [(after(j, r), r, succ[j]) for j in sorted(live) if occurs(j, r)]
        for node, _, start in origins:
            for i in first_hits(f, start, lambda x, r=r: r in f.instrs[x].reg_uses(),
                                lambda x, r=r: occurs(x, r)):
                out.add((node, ("u", i, r)))
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vfg_def_use_matches_brute_force(seed):
    p = parse_program(random_program(random.Random(seed), MIXED, 120))
    mods = mod_sets(p)
    for f in p.functions.values():
        vfg = build_vfg(f, p, mvsa=False)
        got = {(u, v) for u, v, k in vfg.graph.edges(data="kind") if k == "v" and v[0] == "u"}
        assert got == brute_force_flow(f, mods)


# ---------------------------------------------------------------------------
# MVSA


def test_mvsa_equal_constants_alias():
    p = parse_program("func main\n    mov r1, 8\n    mov r2, 8\n    halt\n")
    res = run_mvsa(p["main"], p)
    assert res.known(2, 1) == 8 and res.known(2, 2) == 8
    assert (("d", 0, 1), ("d", 1, 2)) in res.alias_edges
    assert build_vfg(p["main"], p).graph.has_edge(("d", 0, 1), ("d", 1, 2))


def test_mvsa_merge_is_bottom():
    p = parse_program("""\
func main
    cmp r0, 0
    jeq B
    mov r1, 4
    jmp J
B:  mov r1, 5
J:  mov r2, r1
    halt
""")
    f = p["main"]
    res = run_mvsa(f, p)
    j = f.resolve("J")
    assert res.regs_before[j][1] is BOTTOM
    assert res.known(j, 1) is None


def test_lattice_meet():
    from hardtrace.analysis import TOP
    assert meet(3, 3) == 3
    assert meet(3, 4) is BOTTOM
    assert meet(TOP, 7) == 7
    assert meet(BOTTOM, 7) is BOTTOM


def test_mvsa_call_invalidates_callee_writes():
    p = parse_program("""\
func main
    mov r1, 4
    mov r2, 4
    call g
    halt
func g
    mov r1, 9
    ret
""")
    res = run_mvsa(p["main"], p)
    assert res.known(3, 1) is None
    assert res.known(3, 2) == 4


def mvsa_contradictions(p, inp):
    results = {name: run_mvsa(f, p) for name, f in p.functions.items()}
    bad = 0
    for fn, i, regs, mem in shadow_values(p, inp):
        res = results[fn]
        st_ = res.regs_before[i]
        for r, v in enumerate(st_ or ()):
            if isinstance(v, int) and v is not BOTTOM and regs[r] != v:
                bad += 1
        for a, v in (res.mem_before[i] or {}).items():
            if mem[a] != v:
                bad += 1
    return bad


def test_mvsa_sound_on_random_programs(small_corpus):
    for k, case in enumerate(small_corpus[:15]):
        for inp in random_inputs(k, 2):
            assert mvsa_contradictions(case.program, inp) == 0, case.name


# ---------------------------------------------------------------------------
# register identification


def test_toy_identification(toy_case):
    p, cfg, _ = toy_case
    assert identify_registers(vfg_for(p, cfg), p) == {RegPoint("main", 0, 0)}


def test_identification_without_address_edges():
    p = parse_program("func main\n    mov r1, r0\n    xor r2, r1\n    halt\n")
    assert identify_registers(build_vfg(p["main"], p), p) == set()


def test_undeterminable_alias_stays_traced():
    # two loads whose bases come from distinct unknown entry values: each root is traced
    p = parse_program("func main\n    load r2, [r0]\n    load r3, [r1]\n    halt\n")
    cfg = parse_taint_config("# tir-taint 1\nsink main@0 r2\nsink main@1 r3\ntaint 5\n", p)
    pts = identify_registers(vfg_for(p, cfg), p)
    assert {pt.reg for pt in pts} == {0, 1}


# ---------------------------------------------------------------------------
# taint-unchanged blocks

OPS = ["mov", "add", "or", "xor", "and", "load", "store", "cmp", "push", "pop"]


def random_block(rng, n):
    lines = []
    mems = 0
    for _ in range(n):
        op = rng.choice(OPS)
        a, b = rng.randrange(4), rng.randrange(4)
        if op in ("load", "store", "push", "pop"):
            if mems == 3:
                op = "mov"
            else:
                mems += 1
        if op == "load":
            lines.append(f"load r{a}, [r{b}+2]")
        elif op == "store":
            lines.append(f"store [r{b}], " + (f"r{a}" if rng.random() < 0.7 else "7"))
        elif op == "push":
            lines.append(f"push r{a}")
        elif op == "pop":
            lines.append(f"pop r{a}")
        elif op == "cmp":
            lines.append(f"cmp r{a}, r{b}")
        else:
            src = f"r{b}" if rng.random() < 0.7 else str(rng.randrange(9))
            lines.append(f"{op} r{a}, {src}")
    return "func main\n" + "".join(f"    {x}\n" for x in lines) + "    halt\n"


def brute_force_unchanged(f) -> bool:
    """Exhaustive: every input status assignment of the touched cells is a fixpoint."""
    ins_list = f.instrs[:-1]
    cells = []

    def touch(c):
        if c not in cells:
            cells.append(c)

    for i, ins in enumerate(ins_list):
        for r in range(4):
            if r in ins.reg_uses() or r in ins.reg_defs():
                touch(("r", r))
        if ins.op in ("load", "store", "push", "pop"):
            touch(("m", i))
    for bits in itertools.product((False, True), repeat=len(cells)):
        s = dict(zip(cells, bits))
        start = dict(s)
        for i, ins in enumerate(ins_list):
            op, o = ins.op, ins.operands
            if op == "mov":
                s[("r", o[0].reg)] = s[("r", o[1].reg)] if o[1].kind == "reg" else False
            elif op in ("add", "or", "and", "xor"):
                if op == "xor" and o[1].kind == "reg" and o[1].reg == o[0].reg:
                    s[("r", o[0].reg)] = False
                elif o[1].kind == "reg":
                    s[("r", o[0].reg)] = s[("r", o[0].reg)] or s[("r", o[1].reg)]
            elif op in ("load", "pop"):
                s[("r", o[0].reg)] = s[("m", i)]
            elif op == "store":
                s[("m", i)] = s[("r", o[1].reg)] if o[1].kind == "reg" else False
            elif op == "push":
                s[("m", i)] = s[("r", o[0].reg)]
        if s != start:
            return False
    return True


def test_compare_only_block_is_unchanged():
    p = parse_program("func main\n    cmp r0, r1\n    jeq E\nE:  load r0, [r1]\n    halt\n")
    cfg = parse_taint_config("# tir-taint 1\nsink main@2 r0\ntaint 5\n", p)
    assert 0 in compute_taint_unchanged_blocks(p["main"], cfg, p)


def test_move_block_is_changed():
    p = parse_program("func main\n    mov r2, r2\n    mov r1, r0\n    jmp E\nE:  halt\n")
    cfg = parse_taint_config("# tir-taint 1\nsource main@0 r0\nsink main@3 r1\n", p)
    assert 0 not in compute_taint_unchanged_blocks(p["main"], cfg, p)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_taint_unchanged_matches_exhaustive(seed, n):
    p = parse_program(random_block(random.Random(seed), n))
    f = p["main"]
    may = MayTaint(ALL_REGS, True)
    assert is_taint_unchanged(f, f.cfg[0], {}, may) == brute_force_unchanged(f)


# ---------------------------------------------------------------------------
# block selection


def test_single_block_selection():
    assert select_target_blocks([0], {0: set()}, 0) == {0}


def test_toy_block_plan(toy_case):
    p, cfg, _ = toy_case
    plan = plan_trace_points(p, cfg)
    assert plan.describe(p)["blocks"] == ["L3", "L6"]


def replayed_path_matches(case, inp) -> bool:
    from hardtrace.decoder import decode
    from hardtrace.propagation import Replayer
    from hardtrace.rewriter import rewrite
    from hardtrace.tracer import execute
    p, cfg = case.program, case.config
    rw, _ = rewrite(p, plan_trace_points(p, cfg))
    rp = Replayer(p, rw, cfg)
    rp.visited = []
    rp.run(decode(execute(rw, inp).stream))
    model = rp.model
    want = []
    for fn, i, _, _ in shadow_values(rw, inp):
        f = rw[fn]
        if fn in model.skipped or f.instrs[i].op == "record":
            continue
        if f.block_of[i] not in model.funcs[fn].silent:
            want.append(f.instrs[i].origin)
    return rp.visited == want


def test_selected_blocks_reconstruct_path(small_corpus):
    # every block that can change a taint status is recovered in execution order
    for k, case in enumerate(small_corpus):
        for inp in random_inputs(k, 2):
            assert replayed_path_matches(case, inp), case.name


# ---------------------------------------------------------------------------
# function elimination

ELIM = """\
func main
    load r0, [r1]
    call pure
    call outer
    store [r2], r0
    halt
func pure
    add r5, 3
    ret
func outer
    call inner
    ret
func inner
    mov r0, r3
    ret
"""


def test_function_elimination():
    p = parse_program(ELIM)
    cfg = parse_taint_config("# tir-taint 1\nsink main@3 mem\nsource main@0 r3\ntaint 9\n", p)
    skipped = eliminate_functions(p, cfg)
    assert "pure" in skipped
    assert "inner" not in skipped
    assert "outer" not in skipped  # calls a user function that is kept
    assert "main" not in skipped


# ---------------------------------------------------------------------------
# loops


@pytest.mark.parametrize("kind", sorted(LOOP_SHAPES))
def test_loop_shape_classification(kind):
    p, cfg, _ = loop_shape(kind)
    f = p["main"]
    vfg = vfg_for(p, cfg)
    loops = find_loops(f, p)
    assert len(loops) == 1
    assert 2 in loops[0].ivs
    assert classify_loop(loops[0], vfg) == kind


def test_loop_truth_table():
    assert LOOP_TYPES == {(True, True): "non-once", (True, False): "bl-once",
                          (False, True): "reg-once", (False, False): "full-once"}


def test_irreducible_loop_is_non_once():
    p = parse_program("""\
func main
    cmp r0, 0
    jeq B
A:  add r1, 1
    cmp r1, 5
    jlt B
    halt
B:  load r2, [r1]
    jmp A
""")
    cfg = parse_taint_config("# tir-taint 1\nsink main@6 r2\ntaint 3\n", p)
    loops = [lp for lp in find_loops(p["main"], p) if lp.irreducible]
    assert loops
    assert classify_loop(loops[0], vfg_for(p, cfg)) == "non-once"


@pytest.mark.parametrize("kind", ["bl-once", "full-once", "reg-once"])
def test_once_loops_hoist(kind):
    p, cfg, _ = loop_shape(kind)
    plan = plan_trace_points(p, cfg)
    (d,) = plan.loop_directives.values()
    assert d.kind == kind
    assert d.hoisted


# ---------------------------------------------------------------------------
# plan composition


def test_toy_plan(toy_case):
    p, cfg, _ = toy_case
    plan = plan_trace_points(p, cfg)
    assert plan.describe(p)["registers"] == ["r0@L1"]
    assert plan.static_count() == 3


def test_empty_config_empty_plan(toy_case):
    p, _, _ = toy_case
    plan = plan_trace_points(p, TaintConfig())
    assert plan.static_count() == 0 and not plan.loop_directives


def test_plan_not_larger_than_conservative(small_corpus):
    for case in small_corpus:
        sel = plan_trace_points(case.program, case.config).static_count()
        assert sel <= conservative_points(case.program, case.config).static_count(), case.name


def test_plan_serialization(toy_case):
    from hardtrace.analysis import TracePlan
    p, cfg, _ = toy_case
    plan = plan_trace_points(p, cfg)
    again = TracePlan.loads(plan.dumps())
    assert again.registers == plan.registers and again.blocks == plan.blocks
