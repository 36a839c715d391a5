"""Offline taint propagation from decoded trace events.

A replay walks the instrumented program using the values carried by the trace,
turning every executed taint-relevant instruction into micro-operations over
cells (registers and memory words). The micro-operations are then evaluated
sequentially, or in partitions whose boundary statuses are resolved through fences.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import graphs
from .analysis import FLAGS_BIT, ReplayModel, mod_sets
from .decoder import K_BLOCK, K_BRANCH, K_REG, K_TIP, EventBatch
from .isa import BINARY_OPS, INTRINSICS, MASK64, REG_NAMES, SP, Program, TirError, alu, eval_cond
from .oracle import edge_texts, source_text, summary_edge
from .report import SinkVerdict, TaintReport, diff_reports  # noqa: F401  (re-exported)
from .taintgraph import ConfigError, RULE_ARITY, Summary, TaintConfig

log = logging.getLogger(__name__)

SRC, COPY, OR, CLR, SINK = range(5)
FLAGS_CELL = -9
_REGION_BASE = -16


def reg_cell(r: int) -> int:
    return -(r + 1)


class ReplayError(TirError):
    """The trace does not fit the program (corrupt input or an unsound plan)."""


# ---------------------------------------------------------------------------
# event cursor


class EventCursor:
    """Sequential access to events arriving as a sequence of batches."""

    def __init__(self, batches: Iterable[EventBatch] | EventBatch):
        if isinstance(batches, EventBatch):
            batches = [batches]
        self._it: Iterator[EventBatch] = iter(batches)
        self._kind: list[int] = []
        self._site: list[int] = []
        self._value: list[int] = []
        self._pos = 0
        self.consumed = 0

    def _fill(self) -> bool:
        while self._pos >= len(self._kind):
            try:
                b = next(self._it)
            except StopIteration:
                return False
            self._kind = b.kind.tolist()
            self._site = b.site.tolist()
            self._value = b.value.tolist()
            self._pos = 0
        return True

    def peek(self) -> tuple[int, int, int] | None:
        if not self._fill():
            return None
        k = self._pos
        return self._kind[k], self._site[k], self._value[k]

    def next(self) -> tuple[int, int, int] | None:
        ev = self.peek()
        if ev is not None:
            self._pos += 1
            self.consumed += 1
        return ev


# ---------------------------------------------------------------------------
# micro-operation log


@dataclass
class OpLog:
    code: list[int] = field(default_factory=list)
    a: list[int] = field(default_factory=list)
    b: list[int] = field(default_factory=list)
    t: list[int] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)
    sinks: list[tuple[str, str, int]] = field(default_factory=list)  # (site, slot, occurrence)
    boundaries: list[int] = field(default_factory=list)  # op positions at block-hit events
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.code)


class GlobalTaintMap:
    """Tainted memory words with their witnesses, plus an insertion journal."""

    def __init__(self):
        self.cells: dict[int, tuple] = {}
        self.journal: list[tuple[int, bool]] = []

    def lookup(self, addr: int) -> bool:
        return addr in self.cells

    def get(self, addr: int):
        return self.cells.get(addr)

    def set(self, addr: int, w) -> None:
        if w is None:
            if self.cells.pop(addr, None) is not None:
                self.journal.append((addr, False))
        else:
            if addr not in self.cells:
                self.journal.append((addr, True))
            self.cells[addr] = w


class TaintState:
    """Concrete statuses: registers, flags and region cells locally, memory in the global map."""

    def __init__(self):
        self.local: dict[int, tuple] = {}
        self.mem = GlobalTaintMap()

    def get(self, c: int):
        return self.mem.cells.get(c) if c >= 0 else self.local.get(c)

    def set(self, c: int, w) -> None:
        if c >= 0:
            self.mem.set(c, w)
        elif w is None:
            self.local.pop(c, None)
        else:
            self.local[c] = w


def apply_summary(name: str, summary: Summary, args: tuple[int, ...], emit, text) -> None:
    """Emit word-level micro-operations for an intrinsic call from its argument values."""
    if len(summary.args) != RULE_ARITY.get(summary.rule, -1):
        raise ConfigError(f"summary {name}: rule {summary.rule} arity mismatch")
    dst, n = args[0], args[-1]
    src = args[1] if summary.rule != "sanitize" else 0
    for k in range(n):
        if summary.rule == "sanitize":
            emit(CLR, dst + k, 0, 0)
        elif src + k != dst + k:
            emit(COPY if summary.rule == "copy" else OR, dst + k, src + k,
                 text(summary_edge(name, summary.rule, src + k, dst + k)))


# ---------------------------------------------------------------------------
# replay


class Replayer:
    """Follows the instrumented program along the traced execution and logs micro-operations."""

    def __init__(self, p: Program, rw: Program, config: TaintConfig, mode: str = "selective",
                 model: ReplayModel | None = None):
        if mode not in ("selective", "naive"):
            raise ValueError(f"unknown replay mode {mode!r}")
        self.p, self.rw, self.config, self.mode = p, rw, config, mode
        self.model = model or ReplayModel(rw, config, naive=(mode == "naive"))
        self.mods = mod_sets(rw)
        self.etext = edge_texts(p, config.implicit)
        self.slots = self.model.facts.slots
        self.visited: list | None = None  # set to a list to log the origin of every replayed instruction
        self.base_pc: dict[str, int] = {}
        pc = 0
        for f in rw.functions.values():
            self.base_pc[f.name] = pc
            pc += len(f.instrs)
        self.region_end: dict[tuple[str, int], tuple[str, int] | None] = {}
        self.region_label: dict[tuple[str, int], str] = {}
        if config.implicit:
            for f in p.functions.values():
                ipdom = graphs.immediate_postdominators(len(f.cfg), [b.succs for b in f.cfg])
                for b in f.cfg:
                    if f.instrs[b.end - 1].op == "jcc":
                        d = ipdom.get(b.index, graphs.EXIT)
                        self.region_end[(f.name, b.end - 1)] = (f.name, f.cfg[d].start) if d != graphs.EXIT else None
                        self.region_label[(f.name, b.end - 1)] = b.label

    def run(self, events: EventCursor | EventBatch | Iterable[EventBatch]) -> OpLog:
        cur = events if isinstance(events, EventCursor) else EventCursor(events)
        log_ = OpLog()
        code, A, B, T = log_.code, log_.a, log_.b, log_.t
        text_ids: dict[str, int] = {}
        texts = log_.texts

        def text(s: str) -> int:
            k = text_ids.get(s)
            if k is None:
                k = len(texts)
                text_ids[s] = k
                texts.append(s)
            return k

        def emit(op: int, a: int, b: int, t: int) -> None:
            code.append(op)
            A.append(a)
            B.append(b)
            T.append(t)

        config = self.config
        implicit = config.implicit
        naive = self.mode == "naive"
        model = self.model
        rw = self.rw
        etext = self.etext
        slots = self.slots
        relevant = model.facts.relevant
        occ: dict[tuple[str, str], int] = {}
        counter = 0
        init = sorted(config.tainted_memory)
        for k, a in enumerate(init):
            emit(SRC, a, k - len(init), text(f"init [{a:#x}]"))

        regs: list[int | None] = [None] * 8
        flags: tuple[int, int] | None = None
        stack: list[tuple[str, int]] = []
        regions: list[list] = []  # [end origin, depth, cell]
        next_region = _REGION_BASE

        def take(kind: int, site: int | None, where: str) -> int:
            ev = cur.next()
            if ev is None:
                raise ReplayError(f"trace ended early at {where}")
            if ev[0] != kind or (site is not None and ev[1] != site):
                raise ReplayError(f"unexpected event {ev} at {where}")
            if kind == K_BLOCK:
                log_.boundaries.append(len(code))
            return ev[2] if kind == K_REG else ev[1]

        fname = rw.entry
        f = rw[fname]
        fm = model.funcs[fname]
        instrs = f.instrs
        block_of = f.block_of
        i = 0
        steps = 0
        while True:
            steps += 1
            ins = instrs[i]
            op = ins.op
            if op == "record":
                if i not in fm.early:
                    if ins.operands:
                        regs[ins.operands[0].reg] = take(K_REG, ins.site, f"{fname}@{i}")
                    else:
                        take(K_BLOCK, ins.site, f"{fname}@{i}")
                i += 1
                continue
            origin = ins.origin
            if implicit and regions and origin is not None:
                depth = len(stack)
                if any(r[0] == origin and r[1] == depth for r in regions):
                    regions = [r for r in regions if not (r[0] == origin and r[1] == depth)]
            for j in fm.pre_records.get(i, ()):
                r = instrs[j].operands[0].reg
                regs[r] = take(K_REG, instrs[j].site, f"{fname}@{j}")
            quiet = block_of[i] in fm.silent
            if self.visited is not None and not quiet:
                self.visited.append(origin)
            ops = ins.operands
            where = f"{origin[0]}@{origin[1]}" if origin is not None else f"{fname}@{i}"
            ss = slots.get(origin) if origin is not None else None
            sink_cells = None
            if ss is not None:
                for kind, v in ss.sources:
                    if kind == "reg":
                        cell = reg_cell(v)
                    else:
                        base = regs[v.reg]
                        if base is None:
                            raise ReplayError(f"source address unknown at {where}")
                        cell = (base + v.value) & MASK64
                    emit(SRC, cell, counter, text(source_text(self.p, origin[0], origin[1], kind, v)))
                    counter += 1
                if ss.sinks:
                    sink_cells = []
                    for kind, v in ss.sinks:
                        if kind == "reg":
                            sink_cells.append((REG_NAMES[v], reg_cell(v)))
                        else:
                            base = regs[v.reg]
                            if base is None:
                                raise ReplayError(f"sink address unknown at {where}")
                            sink_cells.append((str(v), (base + v.value) & MASK64))
            et = etext[origin] if origin is not None else ()
            written = None
            nxt = i + 1
            if op == "mov":
                d = ops[0].reg
                if ops[1].kind == "reg":
                    s = ops[1].reg
                    regs[d] = regs[s]
                    if not quiet and d != s:
                        emit(COPY, reg_cell(d), reg_cell(s), text(et[0]))
                else:
                    regs[d] = ops[1].value & MASK64
                    if not quiet:
                        emit(CLR, reg_cell(d), 0, 0)
                written = reg_cell(d)
            elif op in BINARY_OPS:
                d = ops[0].reg
                if ops[1].kind == "reg":
                    s = ops[1].reg
                    if op == "xor" and s == d:
                        regs[d] = 0
                        if not quiet:
                            emit(CLR, reg_cell(d), 0, 0)
                    else:
                        x, y = regs[d], regs[s]
                        regs[d] = alu(op, x, y) if x is not None and y is not None else None
                        if not quiet:
                            emit(OR, reg_cell(d), reg_cell(s), text(et[1]))
                else:
                    x = regs[d]
                    regs[d] = alu(op, x, ops[1].value & MASK64) if x is not None else None
                written = reg_cell(d)
            elif op == "load":
                d = ops[0].reg
                base = regs[ops[1].reg]
                if not quiet:
                    if i in relevant[fname]:
                        if base is None:
                            raise ReplayError(f"address of {ins.text()} unknown at {where}")
                        emit(COPY, reg_cell(d), (base + ops[1].value) & MASK64, text(et[0]))
                    else:
                        emit(CLR, reg_cell(d), 0, 0)
                regs[d] = None
                written = reg_cell(d)
            elif op == "store":
                base = regs[ops[0].reg]
                addr = (base + ops[0].value) & MASK64 if base is not None else None
                if not quiet and i in relevant[fname]:
                    if addr is None:
                        raise ReplayError(f"address of {ins.text()} unknown at {where}")
                    if ops[1].kind == "reg":
                        emit(COPY, addr, reg_cell(ops[1].reg), text(et[0]))
                    else:
                        emit(CLR, addr, 0, 0)
                written = addr
            elif op == "cmp":
                x = regs[ops[0].reg]
                y = regs[ops[1].reg] if ops[1].kind == "reg" else ops[1].value & MASK64
                flags = (x, y) if x is not None and y is not None else None
                if implicit and not quiet:
                    emit(COPY, FLAGS_CELL, reg_cell(ops[0].reg), text(et[0]))
                    if ops[1].kind == "reg":
                        emit(OR, FLAGS_CELL, reg_cell(ops[1].reg), text(et[1]))
            elif op == "jmp":
                nxt = f.labels[ins.target]
            elif op == "jcc":
                bi = block_of[i]
                if naive:
                    taken = bool(take(K_BRANCH, None, where))
                    nxt = f.labels[ins.target] if taken else i + 1
                elif flags is not None:
                    taken = eval_cond(ins.cond, flags[0], flags[1])
                    nxt = f.labels[ins.target] if taken else i + 1
                else:
                    found, clobber = fm.landing_info(bi)
                    ev = cur.peek()
                    if ev is None or ev[0] not in (K_BLOCK, K_REG) or ev[1] not in found:
                        raise ReplayError(f"cannot resolve branch at {where}: next event {ev}")
                    nxt = f.cfg[found[ev[1]]].start
                    for r in range(8):
                        if clobber >> r & 1:
                            regs[r] = None
                    if clobber & FLAGS_BIT:
                        flags = None
                if implicit and not quiet and origin in self.region_end:
                    cell = next_region
                    next_region -= 1
                    emit(COPY, cell, FLAGS_CELL,
                         text(f"flags@{where} -bl({self.region_label[origin]})-> ctrl"))
                    regions.append([self.region_end[origin], len(stack), cell])
            elif op == "push":
                sp = regs[SP]
                addr = (sp - 1) & MASK64 if sp is not None else None
                if not quiet and i in relevant[fname]:
                    if addr is None:
                        raise ReplayError(f"stack pointer unknown at {where}")
                    if ops[0].kind == "reg":
                        emit(COPY, addr, reg_cell(ops[0].reg), text(et[0]))
                    else:
                        emit(CLR, addr, 0, 0)
                regs[SP] = addr
                written = addr
            elif op == "pop":
                d = ops[0].reg
                sp = regs[SP]
                if not quiet:
                    if i in relevant[fname]:
                        if sp is None:
                            raise ReplayError(f"stack pointer unknown at {where}")
                        emit(COPY, reg_cell(d), sp, text(et[0]))
                    else:
                        emit(CLR, reg_cell(d), 0, 0)
                regs[SP] = (sp + 1) & MASK64 if sp is not None else None
                regs[d] = None
                written = reg_cell(d)
            elif op == "call":
                if ins.target in INTRINSICS:
                    if not quiet and i in relevant[fname]:
                        sm = config.summary_for(ins.target)
                        vals = [regs[r] for r in sm.args]
                        if any(v is None for v in vals):
                            raise ReplayError(f"arguments of {ins.target} unknown at {where}")
                        apply_summary(ins.target, sm, tuple(vals), emit, text)
                elif ins.target in model.skipped:
                    for r in self.mods[ins.target]:
                        regs[r] = None
                    flags = None
                else:
                    stack.append((fname, i + 1))
                    fname = ins.target
                    f = rw[fname]
                    fm = model.funcs[fname]
                    instrs, block_of = f.instrs, f.block_of
                    nxt = 0
            elif op == "ret":
                if not stack:
                    raise ReplayError(f"return with empty call stack at {where}")
                fname, nxt = stack.pop()
                f = rw[fname]
                fm = model.funcs[fname]
                instrs, block_of = f.instrs, f.block_of
                if naive:
                    target = take(K_TIP, None, where)
                    if target != self.base_pc[fname] + nxt:
                        raise ReplayError(f"return target mismatch at {where}")
                if regions:
                    regions = [r for r in regions if r[1] <= len(stack)]
            if implicit and regions and written is not None and op not in ("call",) and not quiet:
                depth = len(stack)
                for reg_ in regions:
                    if reg_[1] != depth:
                        continue
                    label = REG_NAMES[-written - 1] if written < 0 else f"[{written:#x}]"
                    emit(OR, written, reg_[2], text(f"ctrl -bl-> {label}@{where}"))
            if sink_cells is not None:
                for slot, cell in sink_cells:
                    k = occ.get((where, slot), 0)
                    occ[(where, slot)] = k + 1
                    emit(SINK, cell, len(log_.sinks), 0)
                    log_.sinks.append((where, slot, k))
            if op == "halt":
                break
            i = nxt
        rest = cur.next()
        if rest is not None:
            raise ReplayError(f"trailing trace events after halt: {rest}")
        return log_


# ---------------------------------------------------------------------------
# evaluation


def _witness_list(w, texts) -> tuple[str, ...]:
    out = []
    while w is not None:
        out.append(texts[w[1]])
        w = w[2]
    return tuple(reversed(out))


def _report(log_: OpLog, results: list) -> TaintReport:
    verdicts = [SinkVerdict(site, slot, k, w is not None, _witness_list(w, log_.texts))
                for (site, slot, k), w in zip(log_.sinks, results)]
    return TaintReport(verdicts, warnings=list(log_.warnings))


def evaluate_sequential(log_: OpLog) -> TaintReport:
    state = TaintState()
    results: list = [None] * len(log_.sinks)
    get, put = state.get, state.set
    for op, a, b, t in zip(log_.code, log_.a, log_.b, log_.t):
        if op == COPY:
            w = get(b)
            put(a, (w[0], t, w) if w is not None else None)
        elif op == OR:
            ws = get(b)
            if ws is not None:
                wd = get(a)
                if wd is None or ws[0] < wd[0]:
                    put(a, (ws[0], t, ws))
        elif op == CLR:
            put(a, None)
        elif op == SRC:
            put(a, (b, t, None))
        else:
            results[b] = get(a)
    return _report(log_, results)


# partition nodes: each micro-operation on a cell creates one node
N_INPUT, N_SRC, N_COPY, N_OR, N_NONE = range(5)
UNRESOLVED, UNTAINTED = -2, -1


@dataclass
class PartitionResult:
    """Value DAG of one partition plus the witnesses it could settle without upstream state."""
    nk: list[int]
    na: list[int]
    nb: list[int]
    nt: list[int]
    res: list[int]  # local witness id, UNTAINTED, or UNRESOLVED (depends on an input cell)
    wo: list[int]  # local witness table: origin, text, parent
    wt: list[int]
    wp: list[int]
    cells: dict[int, int]  # cell -> node holding its value at the partition end
    sinks: list[tuple[int, int]]  # (sink index, node)


def _eval_partition(code, A, B, T, lo: int, hi: int) -> PartitionResult:
    nk, na, nb, nt, res = [N_NONE], [0], [0], [0], [UNTAINTED]
    wo: list[int] = []
    wt: list[int] = []
    wp: list[int] = []
    cells: dict[int, int] = {}
    sinks: list[tuple[int, int]] = []

    def new(kind: int, a: int, b: int, t: int, r: int) -> int:
        nk.append(kind)
        na.append(a)
        nb.append(b)
        nt.append(t)
        res.append(r)
        return len(nk) - 1

    def wit(origin: int, t: int, parent: int) -> int:
        wo.append(origin)
        wt.append(t)
        wp.append(parent)
        return len(wo) - 1

    def get(c: int) -> int:
        x = cells.get(c)
        if x is None:
            x = cells[c] = new(N_INPUT, c, 0, 0, UNRESOLVED)
        return x

    for k in range(lo, hi):
        op, a, b, t = code[k], A[k], B[k], T[k]
        if op == COPY:
            x = get(b)
            r = res[x]
            if r >= 0:
                r = wit(wo[r], t, r)
            cells[a] = new(N_COPY, x, 0, t, r)
        elif op == OR:
            xs = get(b)
            rs = res[xs]
            if rs == UNTAINTED:
                continue
            xd = get(a)
            rd = res[xd]
            if rs == UNRESOLVED or rd == UNRESOLVED:
                r = UNRESOLVED
            elif rd == UNTAINTED or wo[rs] < wo[rd]:
                r = wit(wo[rs], t, rs)
            else:
                continue
            cells[a] = new(N_OR, xd, xs, t, r)
        elif op == CLR:
            cells[a] = 0
        elif op == SRC:
            cells[a] = new(N_SRC, b, 0, t, wit(b, t, UNTAINTED))
        else:
            sinks.append((b, get(a)))
    return PartitionResult(nk, na, nb, nt, res, wo, wt, wp, cells, sinks)


class _Fence:
    """Resolves one partition's nodes against the statuses published by its predecessors."""

    def __init__(self, part: PartitionResult, state: TaintState):
        self.p = part
        self.state = state
        self.local: dict[int, tuple] = {}
        self.done: dict[int, tuple | None] = {}

    def _local(self, w: int):
        if w < 0:
            return None
        hit = self.local.get(w)
        if hit is not None:
            return hit
        p = self.p
        path = []
        while w >= 0 and w not in self.local:
            path.append(w)
            w = p.wp[w]
        cur = self.local.get(w) if w >= 0 else None
        for x in reversed(path):
            cur = (p.wo[x], p.wt[x], cur)
            self.local[x] = cur
        return cur

    def value(self, node: int):
        p = self.p
        r = p.res[node]
        if r != UNRESOLVED:
            return self._local(r)
        if node in self.done:
            return self.done[node]
        # iterative post-order over unresolved nodes
        stack = [node]
        while stack:
            x = stack[-1]
            if x in self.done:
                stack.pop()
                continue
            kind = p.nk[x]
            kids = [p.na[x]] if kind == N_COPY else [p.na[x], p.nb[x]] if kind == N_OR else []
            pending = [c for c in kids if p.res[c] == UNRESOLVED and c not in self.done]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            if kind == N_INPUT:
                w = self.state.get(p.na[x])
            elif kind == N_COPY:
                ws = self._get(p.na[x])
                w = (ws[0], p.nt[x], ws) if ws is not None else None
            else:
                wd, ws = self._get(p.na[x]), self._get(p.nb[x])
                w = (ws[0], p.nt[x], ws) if ws is not None and (wd is None or ws[0] < wd[0]) else wd
            self.done[x] = w
        return self.done[node]

    def _get(self, node: int):
        r = self.p.res[node]
        return self._local(r) if r != UNRESOLVED else self.done[node]


def partition_bounds(log_: OpLog, parts: int) -> list[tuple[int, int]]:
    """About `parts` contiguous op ranges, cut at block-hit positions when available."""
    n = len(log_)
    if n == 0:
        return [(0, 0)]
    parts = max(1, parts)
    cuts = sorted(set(x for x in log_.boundaries if 0 < x < n))
    wanted = [n * k // parts for k in range(1, parts)]
    chosen: list[int] = []
    if cuts:
        arr = np.asarray(cuts)
        for w in wanted:
            j = int(np.searchsorted(arr, w))
            cand = [arr[m] for m in (j - 1, j) if 0 <= m < len(arr)]
            chosen.append(int(min(cand, key=lambda c: abs(c - w))))
    else:
        chosen = wanted
    edges = [0] + sorted(set(c for c in chosen if 0 < c < n)) + [n]
    return list(zip(edges[:-1], edges[1:]))


_SHARED: dict = {}


def _proc_task(bounds):
    lg = _SHARED["log"]
    return _eval_partition(lg.code, lg.a, lg.b, lg.t, bounds[0], bounds[1])


def evaluate_parallel(log_: OpLog, workers: int = 4, backend: str = "thread",
                      parts: int | None = None) -> TaintReport:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    bounds = partition_bounds(log_, parts or 4 * workers)
    if backend == "process" and workers > 1:
        _SHARED["log"] = log_
        try:
            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as ex:
                outs = list(ex.map(_proc_task, bounds))
        finally:
            _SHARED.pop("log", None)
    elif workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            outs = list(ex.map(lambda bd: _eval_partition(log_.code, log_.a, log_.b, log_.t, *bd), bounds))
    else:
        outs = [_eval_partition(log_.code, log_.a, log_.b, log_.t, *bd) for bd in bounds]
    # fences: resolve each partition against the statuses published by its predecessors
    state = TaintState()
    results: list = [None] * len(log_.sinks)
    for part in outs:
        fence = _Fence(part, state)
        for idx, node in part.sinks:
            results[idx] = fence.value(node)
        updates = [(c, fence.value(node)) for c, node in part.cells.items()]
        for c, w in updates:
            state.set(c, w)
    return _report(log_, results)


# ---------------------------------------------------------------------------
# entry points


def has_sinks(rw: Program, config: TaintConfig) -> bool:
    return any(ss.sinks for ss in ReplayModel(rw, config).facts.slots.values())


def replay(p: Program, rw: Program, config: TaintConfig, events, mode: str = "selective",
           model: ReplayModel | None = None) -> OpLog:
    return Replayer(p, rw, config, mode, model).run(events)


def propagate_sequential(p: Program, rw: Program, config: TaintConfig, events,
                         mode: str = "selective") -> TaintReport:
    t0 = time.perf_counter()
    if not has_sinks(rw, config):
        return TaintReport(latency=time.perf_counter() - t0)
    rep = evaluate_sequential(replay(p, rw, config, events, mode))
    rep.latency = time.perf_counter() - t0
    return rep


def propagate_parallel(p: Program, rw: Program, config: TaintConfig, events, workers: int = 4,
                       mode: str = "selective", backend: str = "thread") -> TaintReport:
    t0 = time.perf_counter()
    if not has_sinks(rw, config):
        return TaintReport(latency=time.perf_counter() - t0)
    rep = evaluate_parallel(replay(p, rw, config, events, mode), workers, backend)
    rep.latency = time.perf_counter() - t0
    return rep
