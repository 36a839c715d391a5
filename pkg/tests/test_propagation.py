import pytest
from hypothesis import given, settings, strategies as st

from hardtrace.corpus import generate_case, random_inputs
from hardtrace.decoder import EventBatch, decode
from hardtrace.isa import parse_program
from hardtrace.oracle import reference_dta
from hardtrace.pipeline import prepare
from hardtrace.propagation import (CLR, COPY, OR, SINK, SRC, GlobalTaintMap, OpLog, ReplayError,
                                   apply_summary, evaluate_parallel, evaluate_sequential,
                                   partition_bounds, propagate_parallel, propagate_sequential,
                                   replay)
from hardtrace.taintgraph import ConfigError, Summary, parse_taint_config
from hardtrace.tracer import MachineInput, TraceConfig, Trap, execute


def events_for(prep, inp, mode="selective"):
    tmode = "selective" if mode == "selective" else "naive-full"
    return decode(execute(prep.rewritten, inp, TraceConfig(psb_period_bytes=256, mode=tmode)).stream, prep.tmap)


def test_toy_verdict(toy_case):
    p, cfg, inp = toy_case
    prep = prepare(p, cfg)
    rep = propagate_sequential(p, prep.rewritten, cfg, events_for(prep, inp))
    (v,) = rep.verdicts
    assert v.tainted and v.slot == "r0" and v.witness[0] == "init [0x7c]"
    assert rep.canonical() == reference_dta(p, inp, cfg).canonical()


def test_no_sinks_gives_empty_report(toy_case):
    p, _, inp = toy_case
    cfg = parse_taint_config("source main@L1 r0\n", p)
    prep = prepare(p, cfg)
    rep = propagate_sequential(p, prep.rewritten, cfg, events_for(prep, inp))
    assert rep.verdicts == []


def test_corrupted_events_raise(toy_case):
    p, cfg, inp = toy_case
    prep = prepare(p, cfg)
    ev = events_for(prep, inp)
    with pytest.raises(ReplayError):
        propagate_sequential(p, prep.rewritten, cfg, EventBatch.empty())
    keep = ev.kind != ev.kind[0]  # drop the register record
    cut = EventBatch(ev.kind[keep], ev.site[keep], ev.value[keep], ev.segment[keep])
    with pytest.raises(ReplayError):
        propagate_sequential(p, prep.rewritten, cfg, cut)


def corpus_logs(n=12):
    out = []
    for seed in range(n):
        case = generate_case(1000 + seed)
        prep = prepare(case.program, case.config)
        for inp in random_inputs(seed, 2):
            try:
                ev = events_for(prep, inp)
            except Trap:  # a trapped run has no complete trace
                continue
            out.append((case, inp, prep, replay(case.program, prep.rewritten, case.config, ev)))
    return out


@pytest.fixture(scope="module")
def logs():
    return corpus_logs()


def test_sequential_matches_oracle(logs):
    assert logs
    for case, inp, _, lg in logs:
        assert evaluate_sequential(lg).canonical() == reference_dta(case.program, inp, case.config).canonical()


@pytest.mark.parametrize("workers", [1, 2, 4, 8, 16])
def test_parallel_matches_sequential(logs, workers):
    for _, _, _, lg in logs:
        base = evaluate_sequential(lg).canonical()
        assert evaluate_parallel(lg, workers).canonical() == base
        assert evaluate_parallel(lg, workers, parts=3 * workers + 1).canonical() == base


def test_process_backend(logs):
    for _, _, _, lg in logs[:4]:
        assert evaluate_parallel(lg, 2, backend="process").canonical() == evaluate_sequential(lg).canonical()


def test_propagate_entry_points_agree(logs):
    case, inp, prep, _ = logs[0]
    ev = events_for(prep, inp)
    a = propagate_sequential(case.program, prep.rewritten, case.config, ev)
    b = propagate_parallel(case.program, prep.rewritten, case.config, ev, workers=4)
    assert a.canonical() == b.canonical() and a.latency >= 0


def test_naive_replay_matches_oracle():
    for seed in range(6):
        case = generate_case(2000 + seed)
        prep = prepare(case.program, case.config, "conservative")
        for inp in random_inputs(seed, 1):
            try:
                ev = events_for(prep, inp, "naive")
            except Trap:
                continue
            rep = propagate_sequential(case.program, prep.rewritten, case.config, ev, mode="naive")
            assert rep.canonical() == reference_dta(case.program, inp, case.config).canonical()


ops = st.lists(st.tuples(st.sampled_from([SRC, COPY, OR, CLR, SINK]),
                         st.integers(-4, 4), st.integers(-4, 4)), max_size=80)


def make_log(items, cuts):
    lg = OpLog(texts=[f"t{k}" for k in range(8)])
    origin = 0
    for k, (op, a, b) in enumerate(items):
        if op == SRC:
            lg.code.append(SRC); lg.a.append(a); lg.b.append(origin); lg.t.append(k % 8)
            origin += 1
        elif op == SINK:
            lg.code.append(SINK); lg.a.append(a); lg.b.append(len(lg.sinks)); lg.t.append(0)
            lg.sinks.append(("main@0", f"c{a}", len(lg.sinks)))
        else:
            lg.code.append(op); lg.a.append(a); lg.b.append(b); lg.t.append(k % 8)
    lg.boundaries = [c for c in cuts if c < len(lg)]
    return lg


@settings(max_examples=200, deadline=None)
@given(ops, st.lists(st.integers(0, 80), max_size=6), st.integers(1, 6), st.integers(1, 12))
def test_fence_evaluation_equals_sequential(items, cuts, workers, parts):
    lg = make_log(items, cuts)
    assert evaluate_parallel(lg, workers, parts=parts).canonical() == evaluate_sequential(lg).canonical()


@given(st.integers(0, 500), st.lists(st.integers(0, 500), max_size=20), st.integers(1, 40))
def test_partition_bounds_tile(n, cuts, parts):
    lg = OpLog(code=[0] * n, boundaries=cuts)
    bounds = partition_bounds(lg, parts)
    assert bounds[0][0] == 0 and bounds[-1][1] == n
    assert all(a < b or n == 0 for a, b in bounds)
    assert all(x[1] == y[0] for x, y in zip(bounds, bounds[1:]))
    assert len(bounds) <= max(1, parts)
    inner = {a for a, _ in bounds[1:]}
    valid = {c for c in cuts if 0 < c < n}
    if valid:
        assert inner <= valid


def test_apply_summary_ops():
    got = []
    emit = lambda *op: got.append(op)
    apply_summary("memcpy", Summary("copy", (0, 1, 2)), (10, 20, 2), emit, lambda s: s)
    assert got == [(COPY, 10, 20, "[0x14] -copy(memcpy)-> [0xa]"), (COPY, 11, 21, "[0x15] -copy(memcpy)-> [0xb]")]
    got.clear()
    apply_summary("memor", Summary("or", (0, 1, 2)), (5, 5, 3), emit, str)
    assert got == []  # in place: every word keeps its status
    apply_summary("memzero", Summary("sanitize", (0, 2)), (7, 3), emit, str)
    assert got == [(CLR, 7, 0, 0), (CLR, 8, 0, 0), (CLR, 9, 0, 0)]
    with pytest.raises(ConfigError):
        apply_summary("memcpy", Summary("copy", (0, 1)), (1, 2), emit, str)


def test_global_taint_map_journal():
    m = GlobalTaintMap()
    m.set(4, (0, 0, None))
    m.set(4, (1, 0, None))
    m.set(9, None)
    assert m.lookup(4) and not m.lookup(9)
    m.set(4, None)
    assert m.journal == [(4, True), (4, False)] and m.get(4) is None


INLINE = """\
# tir 1
func main
    load r3, [r1]
    store [r0], r3
    load r3, [r1+1]
    store [r0+1], r3
    load r3, [r1+2]
    store [r0+2], r3
{tail}"""

CALL = """\
# tir 1
func main
    call memcpy
{tail}"""

TAIL = """\
S0: load r4, [r5]
S1: load r4, [r5+1]
S2: load r4, [r5+2]
    halt
"""


def test_inline_copy_matches_summary():
    sinks = "sink main@S0 r4\nsink main@S1 r4\nsink main@S2 r4\ntaint 0x10\ntaint 0x12\n"
    inp = MachineInput((0x20, 0x10, 3, 0, 0, 0x20, 0, 0x100), {0x10: 1, 0x11: 2, 0x12: 3})
    statuses = []
    for text, extra in ((INLINE, ""), (CALL, "summary memcpy copy\n")):
        p = parse_program(text.format(tail=TAIL))
        cfg = parse_taint_config(sinks + extra, p)
        prep = prepare(p, cfg)
        rep = propagate_sequential(p, prep.rewritten, cfg, events_for(prep, inp))
        statuses.append([v.tainted for v in rep.verdicts])
    assert statuses[0] == statuses[1] == [True, False, True]
