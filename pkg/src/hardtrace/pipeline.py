"""Command line front end and the three-stage trace/decode/propagate pipeline."""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import os
import queue
import socket
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import TracePlan, conservative_points, plan_trace_points
from .decoder import DecodeError, EventBatch, StreamDecoder, decode_parallel, read_pts, validate_events, write_pts
from .isa import Program, TirError, format_program, parse_program
from .oracle import reference_dta
from .propagation import (EventCursor, OpLog, ReplayError, Replayer, evaluate_parallel, evaluate_sequential,
                          has_sinks, propagate_parallel)
from .report import TaintReport, diff_reports
from .rewriter import TracePointMap, rewrite
from .taintgraph import ConfigError, TaintConfig, parse_taint_config
from .tracer import MachineInput, RunResult, TraceConfig, Trap, execute

log = logging.getLogger("hardtrace")

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3
MODES = ("selective", "conservative", "naive", "oracle-only")
CHUNK_BYTES = 1 << 16


class InputError(Exception):
    """Bad file, format or configuration supplied by the user."""


@dataclass
class PipelineConfig:
    mode: str = "selective"
    decode_workers: int = 1
    propagate_workers: int = 1
    queue_capacity: int = 8
    trace: TraceConfig = field(default_factory=TraceConfig)
    backend: str = "thread"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.queue_capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if self.decode_workers < 1 or self.propagate_workers < 1:
            raise ValueError("worker counts must be >= 1")

    @property
    def replay_mode(self) -> str:
        return "selective" if self.mode == "selective" else "naive"

    @property
    def trace_mode(self) -> str:
        return "selective" if self.mode == "selective" else "naive-full"


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class Prepared:
    program: Program
    config: TaintConfig
    plan: TracePlan
    rewritten: Program
    tmap: TracePointMap


def make_plan(p: Program, config: TaintConfig, mode: str) -> TracePlan:
    if mode == "selective":
        return plan_trace_points(p, config)
    return conservative_points(p, config)


def prepare(p: Program, config: TaintConfig, mode: str = "selective", plan: TracePlan | None = None) -> Prepared:
    config.validate(p)
    plan = plan or make_plan(p, config, mode)
    rw, tmap = rewrite(p, plan)
    return Prepared(p, config, plan, rw, tmap)


def trace_config_for(pc: PipelineConfig) -> TraceConfig:
    t = pc.trace
    return TraceConfig(t.psb_period_bytes, t.buffer_bytes, pc.trace_mode, t.drain_bytes_per_step,
                       t.max_steps, t.memory_words)


def batch_taint(prep: Prepared, stream: bytes, pc: PipelineConfig) -> TaintReport:
    events = decode_parallel(stream, prep.tmap, pc.decode_workers)
    return propagate_parallel(prep.program, prep.rewritten, prep.config, events, pc.propagate_workers,
                              pc.replay_mode, pc.backend)


def run_batch(prep: Prepared, inp: MachineInput, pc: PipelineConfig) -> tuple[TaintReport, RunResult]:
    run = execute(prep.rewritten, inp, trace_config_for(pc))
    t0 = time.perf_counter()
    rep = batch_taint(prep, run.stream, pc)
    rep.latency = time.perf_counter() - t0
    return rep, run


# ---------------------------------------------------------------------------
# live pipeline

_DONE = object()


class _Stop(Exception):
    pass


class _Stage:
    """Bounded hand-off between two stages that gives up when the pipeline is cancelled."""

    def __init__(self, capacity: int, cancel: threading.Event):
        self.q: queue.Queue = queue.Queue(maxsize=capacity)
        self.cancel = cancel

    def put(self, item) -> None:
        while True:
            if self.cancel.is_set():
                raise _Stop
            try:
                self.q.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def get(self):
        while True:
            if self.cancel.is_set():
                raise _Stop
            try:
                return self.q.get(timeout=0.05)
            except queue.Empty:
                continue

    def drain(self):
        while True:
            item = self.get()
            if item is _DONE:
                return
            yield item


class _Chunker:
    def __init__(self, out):
        self.out = out
        self.buf = bytearray()

    def __call__(self, pkt: bytes) -> None:
        self.buf += pkt
        if len(self.buf) >= CHUNK_BYTES:
            self.flush()

    def flush(self) -> None:
        if self.buf:
            self.out(bytes(self.buf))
            self.buf = bytearray()


def _trace_stage(prep: Prepared, inp: MachineInput, tc: TraceConfig, out: _Stage, meta: dict) -> None:
    ch = _Chunker(out.put)
    run = execute(prep.rewritten, inp, tc, on_bytes=ch)
    ch.flush()
    meta["run"] = run
    meta["trace_end"] = time.perf_counter()
    out.put(_DONE)


def _decode_stage(chunks, out: _Stage, tmap: TracePointMap | None) -> None:
    dec = StreamDecoder()
    for chunk in chunks:
        b = dec.feed(chunk)
        if len(b):
            if tmap is not None:
                validate_events(b, tmap)
            out.put(b)
    b = dec.close()
    if len(b):
        if tmap is not None:
            validate_events(b, tmap)
        out.put(b)
    out.put(_DONE)


def _run_threads(targets) -> list[BaseException]:
    cancel = targets[0][1]
    errors: list[BaseException] = []

    def wrap(fn):
        def body():
            try:
                fn()
            except _Stop:
                pass
            except BaseException as e:  # noqa: BLE001 - reported to the caller
                errors.append(e)
                cancel.set()
        return body

    threads = [threading.Thread(target=wrap(fn), daemon=True) for fn, _ in targets]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return errors


def run_live(prep: Prepared, inp: MachineInput, pc: PipelineConfig,
             socket_addr: str | None = None) -> tuple[TaintReport, dict]:
    """Trace generation, decoding and propagation running concurrently over bounded queues.

    With ``socket_addr`` the tracer runs in a separate process and streams bytes over a socket."""
    cancel = threading.Event()
    raw = _Stage(pc.queue_capacity, cancel)
    evq = _Stage(pc.queue_capacity, cancel)
    meta: dict = {}
    result: dict = {}
    tc = trace_config_for(pc)

    def propagate() -> None:
        if not has_sinks(prep.rewritten, prep.config):
            for _ in evq.drain():
                pass
            result["log"] = OpLog()
            return
        rp = Replayer(prep.program, prep.rewritten, prep.config, pc.replay_mode)
        result["log"] = rp.run(EventCursor(evq.drain()))

    if socket_addr is None:
        stages = [(lambda: _trace_stage(prep, inp, tc, raw, meta), cancel),
                  (lambda: _decode_stage(raw.drain(), evq, prep.tmap), cancel),
                  (propagate, cancel)]
        errors = _run_threads(stages)
    else:
        errors = _run_socket(prep, inp, tc, socket_addr, raw, evq, meta, propagate, cancel)
    if errors:
        raise errors[0]
    oplog = result["log"]
    if pc.propagate_workers > 1:
        rep = evaluate_parallel(oplog, pc.propagate_workers, pc.backend)
    else:
        rep = evaluate_sequential(oplog)
    end = time.perf_counter()
    rep.latency = end - meta.get("trace_end", end)
    return rep, meta


def _parse_addr(addr: str):
    if addr in ("auto", ""):
        path = os.path.join(tempfile.mkdtemp(prefix="hardtrace-"), "trace.sock")
        return socket.AF_UNIX, path
    if ":" in addr and not addr.startswith("/"):
        host, port = addr.rsplit(":", 1)
        return socket.AF_INET, (host or "127.0.0.1", int(port))
    return socket.AF_UNIX, addr


def _socket_tracer_main(*args) -> None:
    # Exit directly: after a fork from a non-main thread the interpreter's own
    # thread shutdown can fail and turn a clean run into exit status 1.
    code = 0
    try:
        _socket_tracer(*args)
    except BaseException:
        import traceback
        traceback.print_exc()
        code = 1
    finally:
        sys.stdout.flush()
        sys.stderr.flush()
        os._exit(code)


def _socket_tracer(rw_text: str, inp_text: str, tc: TraceConfig, family, where) -> None:
    """Child process: rebuild the instrumented program, run it, stream packets to the analyzer."""
    rw = parse_program(rw_text)
    inp = MachineInput.from_text(inp_text)
    with socket.socket(family, socket.SOCK_STREAM) as s:
        s.connect(where)
        ch = _Chunker(s.sendall)
        run = execute(rw, inp, tc, on_bytes=ch)
        ch.flush()
        s.shutdown(socket.SHUT_WR)
        trailer = json.dumps({"loss": run.loss_count, "dropped": run.dropped_packets, "packets": run.packets,
                          "records": run.records})
        # the trailer travels on a second connection so the byte stream stays pure
    with socket.socket(family, socket.SOCK_STREAM) as s:
        s.connect(where)
        s.sendall(trailer.encode())


def _run_socket(prep, inp, tc, addr, raw, evq, meta, propagate, cancel) -> list[BaseException]:
    family, where = _parse_addr(addr)
    srv = socket.socket(family, socket.SOCK_STREAM)
    if family == socket.AF_INET:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(where)
    if family == socket.AF_INET:
        where = srv.getsockname()
    srv.listen(2)
    srv.settimeout(60)
    ctx = mp.get_context("fork")
    child = ctx.Process(target=_socket_tracer_main,
                        args=(format_program(prep.rewritten), inp.to_text(), tc, family, where),
                        daemon=True)
    child.start()

    def receive() -> None:
        try:
            conn, _ = srv.accept()
            with conn:
                conn.settimeout(60)
                while True:
                    data = conn.recv(CHUNK_BYTES)
                    if not data:
                        break
                    raw.put(data)
            meta["trace_end"] = time.perf_counter()
            conn2, _ = srv.accept()
            with conn2:
                conn2.settimeout(60)
                body = b""
                while True:
                    data = conn2.recv(4096)
                    if not data:
                        break
                    body += data
            meta["remote"] = json.loads(body.decode() or "{}")
            raw.put(_DONE)
        finally:
            srv.close()
            if family == socket.AF_UNIX:
                try:
                    os.unlink(where)
                except OSError:
                    pass

    errors = _run_threads([(receive, cancel), (lambda: _decode_stage(raw.drain(), evq, prep.tmap), cancel),
                           (propagate, cancel)])
    child.join(timeout=60)
    if child.is_alive():
        child.kill()
        errors.append(RuntimeError("tracer process did not finish"))
    elif child.exitcode != 0 and not errors:
        errors.append(RuntimeError(f"tracer process failed with exit code {child.exitcode}"))
    return errors


# ---------------------------------------------------------------------------
# check


@dataclass
class CheckResult:
    passed: bool
    report: TaintReport | None
    oracle: TaintReport
    diffs: list[str]
    loss: int = 0
    events: int = 0
    error: str | None = None


def check(p: Program, inp: MachineInput, config: TaintConfig, pc: PipelineConfig | None = None,
          prep: Prepared | None = None, live: bool = False, socket_addr: str | None = None) -> CheckResult:
    """Selective (or baseline) pipeline verdicts against the full shadow-taint oracle."""
    pc = pc or PipelineConfig()
    oracle = reference_dta(p, inp, config)
    if pc.mode == "oracle-only":
        return CheckResult(True, oracle, oracle, [])
    prep = prep or prepare(p, config, pc.mode)
    loss = events = 0
    try:
        if live or socket_addr is not None:
            rep, meta = run_live(prep, inp, pc, socket_addr)
            run = meta.get("run")
            loss = run.loss_count if run is not None else meta.get("remote", {}).get("loss", 0)
            events = run.records if run is not None else meta.get("remote", {}).get("records", 0)
        else:
            run = execute(prep.rewritten, inp, trace_config_for(pc))
            loss, events = run.loss_count, run.records
            t0 = time.perf_counter()
            rep = batch_taint(prep, run.stream, pc)
            rep.latency = time.perf_counter() - t0
    except (ReplayError, DecodeError) as e:
        return CheckResult(False, None, oracle, [], loss, events, error=f"{type(e).__name__}: {e}")
    diffs = diff_reports(oracle, rep)
    if not diffs and rep.canonical() != oracle.canonical():
        diffs = ["witness chains differ"]
    return CheckResult(not diffs, rep, oracle, diffs, loss, events)


# ---------------------------------------------------------------------------
# CLI


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None


def _load_program(path: str) -> Program:
    try:
        return parse_program(_read(path))
    except TirError as e:
        raise InputError(f"{path}: {e}") from None


def _load_config(path: str, p: Program) -> TaintConfig:
    try:
        return parse_taint_config(_read(path), p)
    except (ConfigError, TirError) as e:
        raise InputError(f"{path}: {e}") from None


def _load_input(path: str) -> MachineInput:
    try:
        return MachineInput.from_text(_read(path))
    except TirError as e:
        raise InputError(f"{path}: {e}") from None


def _load_plan(path: str) -> TracePlan:
    try:
        return TracePlan.loads(_read(path))
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"{path}: {e}") from None


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _pipeline_config(args) -> PipelineConfig:
    tc = TraceConfig(psb_period_bytes=args.psb_period, buffer_bytes=args.buffer)
    return PipelineConfig(mode=getattr(args, "mode", "selective"),
                          decode_workers=args.decode_workers, propagate_workers=args.workers,
                          queue_capacity=args.queue_capacity, trace=tc, backend=args.backend)


def cmd_analyze(args) -> int:
    p = _load_program(args.program)
    config = _load_config(args.taint, p)
    plan = make_plan(p, config, args.mode)
    _write(args.output, plan.dumps())
    stats = {"mode": args.mode, "points": plan.static_count(), **plan.describe(p)}
    if args.stats:
        cons = conservative_points(p, config).static_count()
        stats["conservative_points"] = cons
        stats["ratio"] = plan.static_count() / cons if cons else None
        for flag in ("reg_opt", "bl_opt", "loop_opt"):
            kw = {flag: False}
            stats[f"without_{flag}"] = plan_trace_points(p, config, **kw).static_count()
    print(json.dumps(stats, indent=1), file=sys.stderr if args.output in (None, "-") else sys.stdout)
    return EXIT_OK


def cmd_rewrite(args) -> int:
    p = _load_program(args.program)
    plan = _load_plan(args.plan)
    rw, tmap = rewrite(p, plan)
    _write(args.output, format_program(rw))
    if args.map:
        Path(args.map).write_text(tmap.dumps())
    return EXIT_OK


def cmd_run(args) -> int:
    p = _load_program(args.program)
    plan = _load_plan(args.plan)
    inp = _load_input(args.input)
    rw, tmap = rewrite(p, plan)
    tc = TraceConfig(psb_period_bytes=args.psb_period, buffer_bytes=args.buffer,
                     mode="naive-full" if plan.naive else "selective")
    t0 = time.perf_counter()
    run = execute(rw, inp, tc)
    dt = time.perf_counter() - t0
    write_pts(args.output, run.stream)
    if args.map:
        Path(args.map).write_text(tmap.dumps())
    print(json.dumps({"loss_bytes": run.loss_count, "dropped_packets": run.dropped_packets,
                      "packets": run.packets, "records": run.records,
                      "bytes": len(run.stream), "steps": run.state.steps, "seconds": round(dt, 6)}))
    return EXIT_OK


def cmd_decode(args) -> int:
    stream = read_pts(args.stream)
    tmap = TracePointMap.loads(_read(args.map)) if args.map else None
    batch = decode_parallel(stream, tmap, args.decode_workers)
    if args.output:
        Path(args.output).write_bytes(batch.dumps())
    else:
        for ev in batch.events():
            print(*ev.as_tuple())
    print(json.dumps({"events": len(batch)}), file=sys.stderr)
    return EXIT_OK


def cmd_taint(args) -> int:
    p = _load_program(args.program)
    config = _load_config(args.taint, p)
    plan = _load_plan(args.plan)
    pc = _pipeline_config(args)
    pc.mode = "naive" if plan.naive else "selective"
    prep = prepare(p, config, plan=plan)
    if args.live:
        inp = _load_input(args.live)
        t0 = time.perf_counter()
        rep, meta = run_live(prep, inp, pc, args.socket)
        traced = meta.get("trace_end", t0) - t0
    else:
        if not args.stream:
            raise InputError("taint needs a stream file or --live INPUT")
        if args.stream.endswith(".evt"):
            events = EventBatch.loads(Path(args.stream).read_bytes())
            t0 = time.perf_counter()
            rep = propagate_parallel(p, prep.rewritten, config, events, pc.propagate_workers,
                                     pc.replay_mode, pc.backend)
        else:
            stream = read_pts(args.stream)
            t0 = time.perf_counter()
            rep = batch_taint(prep, stream, pc)
        rep.latency = time.perf_counter() - t0
        traced = 0.0
    _write(args.output, rep.dumps() if args.output else rep.to_text())
    # relative latency: propagation lag after the traced run ends, per second of tracing
    rel = round(rep.latency / traced, 4) if traced > 0 else None
    print(json.dumps({"latency_s": round(rep.latency, 6), "relative_latency": rel,
                      **rep.summary()}), file=sys.stderr)
    return EXIT_OK


def cmd_check(args) -> int:
    p = _load_program(args.program)
    inp = _load_input(args.input)
    config = _load_config(args.taint, p)
    pc = _pipeline_config(args)
    if args.plan:
        plan = _load_plan(args.plan)
        pc.mode = "naive" if plan.naive else "selective"
        prep = prepare(p, config, plan=plan)
    else:
        prep = None
    res = check(p, inp, config, pc, prep, live=args.live, socket_addr=args.socket)
    if res.error:
        print(f"FAIL: {res.error}")
        return EXIT_INVARIANT
    if res.passed:
        print(f"PASS sinks={len(res.oracle.verdicts)} tainted={res.oracle.tainted_count} loss_bytes={res.loss}")
        return EXIT_OK
    print("FAIL")
    for d in res.diffs[:20]:
        print("  " + d)
    return EXIT_MISMATCH


def cmd_stats(args) -> int:
    from .corpus import generate_corpus
    rows = []
    for c in generate_corpus(args.corpus, args.seed):
        sel = plan_trace_points(c.program, c.config).static_count()
        cons = conservative_points(c.program, c.config).static_count()
        rows.append({"case": c.name, "profile": c.profile, "selective": sel, "conservative": cons,
                     "ratio": sel / cons if cons else None})
        print(json.dumps(rows[-1]))
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    mean = sum(ratios) / len(ratios) if ratios else 0.0
    print(f"programs={len(rows)} mean_selective={sum(r['selective'] for r in rows) / max(1, len(rows)):.2f} "
          f"mean_conservative={sum(r['conservative'] for r in rows) / max(1, len(rows)):.2f} "
          f"mean_ratio={mean:.3f}")
    return EXIT_OK


def _common(sp, workers: bool = True) -> None:
    sp.add_argument("--psb-period", type=int, default=4096)
    sp.add_argument("--buffer", type=int, default=None, help="bounded trace buffer in bytes")
    if workers:
        sp.add_argument("--workers", type=int, default=1, help="propagation workers")
        sp.add_argument("--decode-workers", type=int, default=1)
        sp.add_argument("--queue-capacity", type=int, default=8)
        sp.add_argument("--backend", choices=("thread", "process"), default="thread")
        sp.add_argument("--socket", default=None, metavar="ADDR",
                        help="run the tracer in a separate process (host:port, unix path or 'auto')")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hardtrace", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("analyze", help="compute a trace plan")
    sp.add_argument("program")
    sp.add_argument("taint")
    sp.add_argument("-o", "--output")
    sp.add_argument("--mode", choices=("selective", "conservative"), default="selective")
    sp.add_argument("--stats", action="store_true", help="include ablation point counts")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("rewrite", help="instrument a program with a plan")
    sp.add_argument("program")
    sp.add_argument("plan")
    sp.add_argument("-o", "--output")
    sp.add_argument("--map")
    sp.set_defaults(func=cmd_rewrite)

    sp = sub.add_parser("run", help="execute an instrumented program and write its packet stream")
    sp.add_argument("program")
    sp.add_argument("plan")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--map")
    _common(sp, workers=False)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("decode", help="decode a packet stream")
    sp.add_argument("stream")
    sp.add_argument("--map")
    sp.add_argument("-o", "--output")
    sp.add_argument("--decode-workers", type=int, default=1)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("taint", help="propagate taint from a stream or a live run")
    sp.add_argument("program")
    sp.add_argument("taint")
    sp.add_argument("plan")
    sp.add_argument("stream", nargs="?")
    sp.add_argument("--live", metavar="INPUT")
    sp.add_argument("-o", "--output")
    _common(sp)
    sp.set_defaults(func=cmd_taint)

    sp = sub.add_parser("check", help="compare pipeline verdicts with the shadow-taint oracle")
    sp.add_argument("program")
    sp.add_argument("input")
    sp.add_argument("taint")
    sp.add_argument("--plan")
    sp.add_argument("--mode", choices=MODES, default="selective")
    sp.add_argument("--live", action="store_true")
    _common(sp)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("stats", help="selective vs conservative point counts over a generated corpus")
    sp.add_argument("--corpus", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_stats)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, FileNotFoundError, Trap) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ReplayError, DecodeError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except TirError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
