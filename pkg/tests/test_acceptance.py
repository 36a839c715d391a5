"""Acceptance criteria, one test each, at the stated tolerances.

Every test appends a PASS/FAIL line to the acceptance log printed at the end of the run."""
import os
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout

import numpy as np
import pytest

from hardtrace.analysis import (BOTTOM, build_vfg, classify_loop, conservative_points, find_loops,
                                plan_trace_points, program_facts, run_mvsa)
from hardtrace.corpus import generate_corpus, loop_shape, loss_program, random_inputs
from hardtrace.decoder import decode, decode_parallel
from hardtrace.pipeline import PipelineConfig, batch_taint, check, prepare, run_batch, run_live
from hardtrace.propagation import evaluate_parallel, propagate_parallel, replay
from hardtrace.report import diff_reports
from hardtrace.rewriter import rewrite
from hardtrace.samples import toy
from hardtrace.tracer import TraceConfig, Trap, execute, shadow_values

CORPUS_SIZE, INPUTS = 200, 5


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CORPUS_SIZE, seed=0)


@pytest.fixture
def report(acceptance_log, request):
    """Call with (passed, detail); records the line and asserts."""
    n = request.node.get_closest_marker("criterion").args[0]

    def rec(passed: bool, detail: str) -> None:
        acceptance_log.append(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
        assert passed, detail
    return rec


@pytest.mark.criterion(1)
def test_precision_equivalence(corpus, report):
    t0 = time.perf_counter()
    total = passed = 0
    failures = []
    for k, case in enumerate(corpus):
        prep = prepare(case.program, case.config)
        for inp in random_inputs(k, INPUTS):
            total += 1
            try:
                res = check(case.program, inp, case.config, prep=prep)
            except Trap as e:
                failures.append(f"{case.name}: trap {e}")
                continue
            if res.passed:
                passed += 1
            else:
                failures.append(f"{case.name}: {res.error or res.diffs[:2]}")
    dt = time.perf_counter() - t0
    largest = max(sum(len(f.instrs) for f in c.program.functions.values()) for c in corpus)
    ok = passed == total and total >= 1000 and dt < 600 and largest <= 500
    report(ok, f"{passed}/{total} cases PASS over {len(corpus)} programs (largest {largest} instrs) "
               f"in {dt:.1f}s" + (f"; first failures {failures[:3]}" if failures else ""))


@pytest.mark.criterion(2)
def test_toy_end_to_end(report):
    p, cfg, inp = toy()
    prep = prepare(p, cfg)
    desc = prep.plan.describe(p)
    points = set(desc["registers"]) | {f"block {b}" for b in desc["blocks"]}
    run = execute(prep.rewritten, inp)
    events = [(e.kind, e.value if e.kind == "reg" else prep.tmap.sites[e.site].describe(p))
              for e in decode(run.stream, prep.tmap).events()]
    res = check(p, inp, cfg, prep=prep)
    verdict = res.report.verdicts[0] if res.report and res.report.verdicts else None
    ok = (points == {"r0@L1", "block L3", "block L6"} and prep.plan.static_count() == 3
          and events == [("reg", 0x80), ("block", "block L6")]
          and verdict is not None and verdict.tainted and res.passed)
    report(ok, f"points={sorted(points)} events={events} sink={verdict.status if verdict else None}")


@pytest.mark.criterion(3)
def test_trace_point_reduction(corpus, report):
    rows = []
    for case in corpus:
        sel = plan_trace_points(case.program, case.config).static_count()
        cons = conservative_points(case.program, case.config).static_count()
        rows.append((case.profile, sel, cons))
    mean_sel = np.mean([r[1] for r in rows])
    mean_cons = np.mean([r[2] for r in rows])
    ratios = {prof: np.mean([s / c for p_, s, c in rows if p_ == prof and c]) for prof in {r[0] for r in rows}}
    loop_ratio = ratios.get("loop-memory", float("nan"))
    ok = mean_sel < mean_cons and loop_ratio < 0.6
    report(ok, f"mean points selective {mean_sel:.2f} < conservative {mean_cons:.2f}; mean ratio "
               + ", ".join(f"{k} {v:.3f}" for k, v in sorted(ratios.items())))


@pytest.mark.criterion(4)
def test_data_loss(report):
    p, cfg, inp = loss_program(1_000_000)
    trace = TraceConfig(buffer_bytes=4096)
    sel = check(p, inp, cfg, PipelineConfig("selective", trace=trace))
    naive_prep = prepare(p, cfg, "conservative")
    pc = PipelineConfig("naive", trace=trace)
    run = execute(naive_prep.rewritten, inp, TraceConfig(buffer_bytes=4096, mode="naive-full"))
    try:
        rep = batch_taint(naive_prep, run.stream, pc)
        outcome = "diverges" if diff_reports(sel.oracle, rep) or rep.canonical() != sel.oracle.canonical() \
            else "matches"
    except Exception as e:  # decode or replay errors are the expected failure mode
        outcome = f"errors ({type(e).__name__})"
    ok = run.loss_count > 0 and outcome != "matches" and sel.loss == 0 and sel.passed
    report(ok, f"naive-full loss {run.loss_count} bytes ({run.dropped_packets} packets), run {outcome}; "
               f"selective loss {sel.loss}, {'PASS' if sel.passed else 'FAIL'}")


WORKERS = (1, 2, 4, 8, 16)


@pytest.mark.criterion(5)
def test_parallel_determinism(corpus, report):
    mismatches, cases = [], 0
    for k, case in enumerate(corpus):
        if cases == 50:
            break
        prep = prepare(case.program, case.config)
        inp = random_inputs(k, 1)[0]
        try:
            stream = execute(prep.rewritten, inp, TraceConfig(psb_period_bytes=64)).stream
        except Trap:
            continue
        cases += 1
        dec = {w: decode_parallel(stream, prep.tmap, w) for w in WORKERS}
        if len({d.canonical() for d in dec.values()}) != 1:
            mismatches.append(f"{case.name} decode")
        reps = {w: propagate_parallel(case.program, prep.rewritten, case.config, dec[1], w).canonical()
                for w in WORKERS}
        if len(set(reps.values())) != 1:
            mismatches.append(f"{case.name} propagate")
    report(not mismatches and cases == 50,
           f"{cases} cases, workers {WORKERS}: {len(mismatches)} differing outputs {mismatches[:3]}")


@pytest.mark.criterion(6)
def test_loop_taxonomy(report):
    kinds = {}
    for kind in ("non-once", "reg-once", "bl-once", "full-once"):
        p, cfg, _ = loop_shape(kind)
        (loop,) = find_loops(p["main"], p)
        kinds[kind] = classify_loop(loop, build_vfg(p["main"], p, program_facts(p, cfg)))
    p, cfg, inp = loop_shape("full-once", 1000)
    counts = {}
    for hoist in (True, False):
        rw, tmap = rewrite(p, plan_trace_points(p, cfg, loop_opt=hoist))
        counts[hoist] = len(decode(execute(rw, inp).stream, tmap))
    ratio = counts[False] / max(1, counts[True])
    ok = all(k == v for k, v in kinds.items()) and ratio >= 10
    report(ok, f"classified {kinds}; full-once events {counts[False]} -> {counts[True]} ({ratio:.0f}x)")


def _unit_stream() -> bytes:
    p, cfg, inp = loss_program(200_000)
    prep = prepare(p, cfg, "conservative")
    return execute(prep.rewritten, inp, TraceConfig(mode="naive-full")).stream


def _best(fn, reps: int = 2) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


@pytest.mark.criterion(7)
def test_throughput_scaling(report):
    t_start = time.perf_counter()
    unit = _unit_stream()
    decode_parallel(unit, None, 4)  # compile and warm up
    stream = unit * ((256 << 20) // len(unit) + 1)  # every copy starts with a PSB
    mb = len(stream) / (1 << 20)
    d1 = _best(lambda: decode_parallel(stream, None, 1))
    d4 = _best(lambda: decode_parallel(stream, None, 4))
    del stream
    # propagation: evaluation of a multi-million operation log (replay itself is sequential)
    p, cfg, inp = loss_program(400_000)
    prep = prepare(p, cfg)
    log_ = replay(p, prep.rewritten, cfg, decode(execute(prep.rewritten, inp).stream, prep.tmap))
    p1 = _best(lambda: evaluate_parallel(log_, 1, "process"), 1)
    p4 = _best(lambda: evaluate_parallel(log_, 4, "process"), 1)
    dt = time.perf_counter() - t_start
    dec_x, prop_x = d1 / d4, p1 / p4
    ok = dec_x >= 2.0 and prop_x >= 1.5 and dt < 300
    report(ok, f"decoder {mb:.0f}MB: {mb / d1:.0f} MB/s at 1 worker, {mb / d4:.0f} MB/s at 4 ({dec_x:.2f}x, need 2x); "
               f"propagation {len(log_)} ops: {p1:.2f}s vs {p4:.2f}s ({prop_x:.2f}x, need 1.5x); "
               f"cpus={os.cpu_count()} total {dt:.0f}s")


@pytest.mark.criterion(8)
def test_mvsa_soundness(corpus, report):
    checked = contradictions = 0
    for k, case in enumerate(corpus):
        p = case.program
        results = {name: run_mvsa(f, p) for name, f in p.functions.items()}
        for inp in random_inputs(k, INPUTS):
            try:
                for fn, i, regs, mem in shadow_values(p, inp):
                    res = results[fn]
                    for r, v in enumerate(res.regs_before[i] or ()):
                        if isinstance(v, int) and v is not BOTTOM:
                            checked += 1
                            contradictions += regs[r] != v
                    for a, v in (res.mem_before[i] or {}).items():
                        checked += 1
                        contradictions += mem[a] != v
            except Trap:
                continue
    report(contradictions == 0 and checked > 0,
           f"{contradictions} contradictions among {checked} Known facts checked against execution")


WATCHDOG = 60


@pytest.mark.criterion(9)
def test_pipeline_equivalence(corpus, report):
    cases, mismatches, hung = 0, [], []
    ex = ThreadPoolExecutor(1)
    try:
        for k, case in enumerate(corpus):
            if cases == 50:
                break
            prep = prepare(case.program, case.config)
            inp = random_inputs(k, 1)[0]
            try:
                batch, _ = run_batch(prep, inp, PipelineConfig())
            except Trap:
                continue
            cases += 1
            variants = [("capacity 1", PipelineConfig(queue_capacity=1), None),
                        ("capacity 1, 4 workers", PipelineConfig(queue_capacity=1, propagate_workers=4), None),
                        ("socket", PipelineConfig(queue_capacity=1), "auto")]
            for name, pc, sock in variants:
                fut = ex.submit(run_live, prep, inp, pc, sock)
                try:
                    rep, _ = fut.result(timeout=WATCHDOG)
                except FutureTimeout:
                    hung.append(f"{case.name} {name}")
                    break
                if rep.canonical() != batch.canonical():
                    mismatches.append(f"{case.name} {name}")
            if hung:
                break
    finally:
        ex.shutdown(wait=not hung)
    ok = cases == 50 and not mismatches and not hung
    report(ok, f"{cases} cases live (capacity 1, socket split) vs batch: {len(mismatches)} mismatches, "
               f"{len(hung)} watchdog expiries {(mismatches + hung)[:3]}")
