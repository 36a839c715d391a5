import random

import pytest
from hypothesis import given, settings, strategies as st

from hardtrace.corpus import MIXED, random_program
from hardtrace.isa import parse_program
from hardtrace.taintgraph import (ConfigError, Slot, Summary, TaintConfig, build_graphs,
                                  build_taint_graph, check_summary_arity, instruction_edges,
                                  parse_taint_config, reaching_defs, site_slots)

from helpers import instr_succs


def prog(body: str, extra: str = ""):
    return parse_program("# tir 1\nfunc main\n" + body + extra)


def test_toy_edges(toy_case):
    p, cfg, _ = toy_case
    g = build_graphs(p, cfg)["main"]
    for src, label, dst in [
        ("r0@L1(use)", "a", "r1@L1(def)"),
        ("r1@L7(use)", "o", "r1@L7(def)"),
        ("r1@L8(use)", "d", "[r1]@L8(mem)"),
        ("r1@L1(def)", "bl(L6)", "r1@L7(use)"),
        ("r1@L1(def)", "bl(L3)", "r1@L5(use)"),
        ("r1@L7(def)", "a", "r1@L8(use)"),
        ("[r1]@L8(mem)", "a", "r0@L8(def)"),
    ]:
        assert g.has_edge(src, label, dst), (src, label, dst)
    # the join block L8 is not control dependent on the branch
    assert not any(e.label == "bl" and e.block == "L8" for e in g.edges)
    assert "mark source r0@L1(use)" in g.dump()
    assert "mark sink r0@L8(def)" in g.dump()


def test_halt_only_function_has_no_edges():
    p = prog("    halt\n")
    g = build_taint_graph(p["main"], TaintConfig(), p)
    assert g.edges == [] and g.nodes == set()


@pytest.mark.parametrize("text, src", [
    ("xor r1, r1", "imm@main@0(use)"),
    ("mov r1, 5", "imm@main@0(use)"),
])
def test_constant_writes_are_s_edges(text, src):
    p = prog(f"    {text}\n    halt\n")
    g = build_taint_graph(p["main"], TaintConfig(), p)
    assert g.has_edge(src, "s", "r1@main@0(def)")
    assert not any(e.label == "o" for e in g.edges)


def test_store_immediate_and_push():
    p = prog("    store [r1+2], 3\n    push r4\n    halt\n")
    g = build_taint_graph(p["main"], TaintConfig(), p)
    assert g.has_edge("imm@main@0(use)", "s", "[r1+2]@main@0(mem)")
    assert g.has_edge("r1@main@0(use)", "d", "[r1+2]@main@0(mem)")
    assert g.has_edge("r4@main@1(use)", "a", "[r7-1]@main@1(mem)")
    assert g.has_edge("r7@main@1(use)", "d", "[r7-1]@main@1(mem)")


def test_binary_op_or_edges():
    es = instruction_edges("main", 0, prog("    add r2, r3\n    halt\n")["main"].instrs[0])
    assert sorted((e.src.slot, e.label, e.dst.slot) for e in es) == [("r2", "o", "r2"), ("r3", "o", "r2")]


def test_implicit_cmp_edges():
    ins = prog("    cmp r2, r3\n    halt\n")["main"].instrs[0]
    assert instruction_edges("main", 0, ins, implicit=False) == []
    es = instruction_edges("main", 0, ins, implicit=True)
    assert {e.dst.slot for e in es} == {"flags"} and len(es) == 2


def brute_reaching(f):
    """Forward walk from each def until the register is redefined."""
    succ = instr_succs(f)
    out = {}
    for i, ins in enumerate(f.instrs):
        for r in ins.reg_uses():
            out[(i, r)] = set()
    for d, ins in enumerate(f.instrs):
        for r in ins.reg_defs():
            seen, stack = set(), list(succ[d])
            while stack:
                x = stack.pop()
                if x in seen:
                    continue
                seen.add(x)
                if r in f.instrs[x].reg_uses():
                    out[(x, r)].add(d)
                if r not in f.instrs[x].reg_defs():
                    stack.extend(succ[x])
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reaching_defs_match_brute_force(seed):
    p = parse_program(random_program(random.Random(seed), MIXED, 120))
    for f in p.functions.values():
        assert reaching_defs(f) == brute_reaching(f)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flow_edges_cover_reaching_defs(seed):
    p = parse_program(random_program(random.Random(seed), MIXED, 120))
    for f in p.functions.values():
        g = build_taint_graph(f, TaintConfig())
        flow = {(e.src.index, e.dst.index, e.src.slot) for e in g.edges
                if e.src.polarity == "def" and e.dst.polarity == "use"}
        want = {(d, u, f"r{r}") for (u, r), ds in reaching_defs(f).items() for d in ds}
        assert flow == want


def test_call_site_feeds_callee_entry():
    p = parse_program("# tir 1\nfunc main\n    call g\n    halt\nfunc g\n    mov r0, r3\n    ret\n")
    g = build_graphs(p, TaintConfig())["main"]
    assert any(e.label == "bl" and e.src.slot == "r3" and e.dst.func == "g" for e in g.edges)


@pytest.mark.parametrize("text, msg", [
    ("source main@0", "takes a site and a slot"),
    ("source main-0 r0", "bad site"),
    ("sink main@0 r9", "bad slot"),
    ("source main@NOPE r0", "unknown label"),
    ("summary memcpy frob", "unknown summary rule"),
    ("summary memcpy copy r0 r1", "takes 3 registers"),
    ("summary memcpy copy r0 r1 5", "must be registers"),
    ("taint zz", "bad address"),
    ("implicit maybe", "implicit takes"),
    ("launch main@0", "unknown directive"),
    ("source main@40 r0", "not found"),
    ("sink main@0 mem", "no memory operand"),
    ("summary strlen copy", "unknown intrinsic"),
])
def test_config_errors(toy_case, text, msg):
    p, _, _ = toy_case
    with pytest.raises(ConfigError, match=msg):
        parse_taint_config("# tir-taint 1\n\n" + text + "\n", p)


def test_config_error_line(toy_case):
    p, _, _ = toy_case
    with pytest.raises(ConfigError) as ei:
        parse_taint_config("# tir-taint 1\ntaint 0x10\nbogus\n", p)
    assert ei.value.line == 3 and "line 3" in str(ei.value)


def test_labels_resolve_and_default_summary_args(toy_case):
    p, _, _ = toy_case
    cfg = parse_taint_config("source main@L5 mem\nsummary memzero sanitize\nimplicit on\n", p)
    assert cfg.sources == [Slot("main", p["main"].resolve("L5"), "mem")]
    assert cfg.summaries["memzero"] == Summary("sanitize", (0, 2))
    assert cfg.implicit


def test_summary_arity():
    check_summary_arity(Summary("copy", (0, 1, 2)))
    check_summary_arity(Summary("sanitize", (0, 2)))
    with pytest.raises(ConfigError):
        check_summary_arity(Summary("or", (0, 1)))
    with pytest.raises(ConfigError):
        check_summary_arity(Summary("sanitize", (0, 1, 2)))
    with pytest.raises(ConfigError, match="no summary"):
        TaintConfig().summary_for("memcpy")


def test_config_text_round_trip(toy_case):
    p, _, _ = toy_case
    cfg = parse_taint_config("source main@0 r0\nsink main@L8 mem\nsummary memor or r1 r2 r3\n"
                             "taint 0x7c\ntaint 12\nimplicit on\n", p)
    again = parse_taint_config(cfg.to_text(), p)
    assert again == cfg


def test_site_slots_merge_pseudo_ops():
    p = prog("    taint_source r2\n    taint_sink [r2+1]\n    mov r3, r2\n    halt\n")
    cfg = parse_taint_config("sink main@0 r3\n", p)
    slots = site_slots(p, cfg)
    assert set(slots) == {("main", 0), ("main", 1)}
    ss0 = slots[("main", 0)]
    assert ss0.sources == (("reg", 2),) and ss0.sinks == (("reg", 3),)
    kind, o = slots[("main", 1)].sinks[0]
    assert kind == "mem" and str(o) == "[r2+1]"
