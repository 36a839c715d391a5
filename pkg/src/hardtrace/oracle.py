"""Instruction-level shadow taint interpreter used as the ground-truth oracle.

Every register and memory word carries a taint bit (a witness chain when set).
Assignment copies status, binary operations OR statuses, constant writes sanitize.
Witness choice at an OR: the operand whose taint originates from the earlier source
application wins; ties keep the destination's own witness.
"""
from __future__ import annotations

from . import graphs
from .isa import MASK64, REG_NAMES, SP, Operand, Program
from .report import SinkVerdict, TaintReport
from .taintgraph import TaintConfig, instruction_edges, site_slots
from .tracer import (BIN_RI, BIN_RR, CALL, CALLI, CMP_RI, CMP_RR, HALT, JCC, JMP, LOAD, MOV_RI,
                     MOV_RR, POP, PUSH_I, PUSH_R, RET, STORE_I, STORE_R, MachineInput, TraceConfig,
                     Trap, compile_program, initial_state, run_intrinsic)
from .isa import alu, eval_cond


def edge_texts(p: Program, implicit: bool) -> dict[tuple[str, int], list[str]]:
    """Text of the non-address edges of each instruction, in graph order."""
    out = {}
    for f in p.functions.values():
        for i, ins in enumerate(f.instrs):
            es = [e for e in instruction_edges(f.name, i, ins, implicit) if e.label != "d"]
            out[(f.name, i)] = [f"{e.src.text(f)} -{e.tag}-> {e.dst.text(f)}" for e in es]
    return out


def mem_slot_text(o: Operand) -> str:
    return str(o)


def source_text(p: Program, func: str, index: int, kind: str, v) -> str:
    name = p[func].site_name(index)
    return f"source {REG_NAMES[v] if kind == 'reg' else str(v)}@{name}"


def summary_edge(name: str, rule: str, src: int, dst: int) -> str:
    return f"[{src:#x}] -{rule}({name})-> [{dst:#x}]"


def init_witnesses(config: TaintConfig) -> dict[int, tuple]:
    addrs = sorted(config.tainted_memory)
    n = len(addrs)
    return {a: (k - n, f"init [{a:#x}]", None) for k, a in enumerate(addrs)}


def witness_list(w) -> tuple[str, ...]:
    out = []
    while w is not None:
        out.append(w[1])
        w = w[2]
    return tuple(reversed(out))


def _or(wd, ws, edge):
    """dst |= src with the canonical witness choice."""
    if ws is not None and (wd is None or ws[0] < wd[0]):
        return (ws[0], edge, ws)
    return wd


def reference_dta(p: Program, inp: MachineInput, config: TaintConfig,
                  trace_cfg: TraceConfig | None = None) -> TaintReport:
    """Full shadow-taint execution of the original program."""
    tc = trace_cfg or TraceConfig(mode="none")
    config.validate(p)
    c = compile_program(p)
    st = initial_state(c, inp, tc.memory_words)
    regs, mem, stack = st.regs, st.memory, st.call_stack
    size = len(mem)
    code = c.code
    rt: list = [None] * 8
    mt: dict[int, tuple] = dict(init_witnesses(config))
    slots = site_slots(p, config)
    slot_at = {}
    for pc in range(len(code)):
        key = (c.func_of[pc], c.index_of[pc])
        ins = p.instruction(key)
        if ins.origin is not None and ins.origin in slots:
            slot_at[pc] = slots[ins.origin]
    texts = edge_texts(p, config.implicit)
    etext = [texts[(c.func_of[pc], c.index_of[pc])] for pc in range(len(code))]
    implicit = config.implicit
    end_pc: dict[int, int] = {}
    jcc_label: dict[int, str] = {}
    if implicit:
        for f in p.functions.values():
            base = c.entry_pc[f.name]
            ipdom = graphs.immediate_postdominators(len(f.cfg), [b.succs for b in f.cfg])
            for b in f.cfg:
                last = b.end - 1
                if f.instrs[last].op == "jcc":
                    d = ipdom.get(b.index, graphs.EXIT)
                    end_pc[base + last] = base + f.cfg[d].start if d != graphs.EXIT else -1
                    jcc_label[base + last] = b.label
    regions: list[list] = []  # [end pc, frame depth, witness]
    flags_t = None
    counter = 0
    occ: dict[tuple[str, str], int] = {}
    verdicts: list[SinkVerdict] = []
    flags = None
    pc = st.pc
    steps = 0

    def addr_of(o: Operand) -> int:
        a = (regs[o.reg] + o.value) & MASK64
        if a >= size:
            raise Trap(f"illegal memory access {a:#x}", c.site(pc))
        return a

    while True:
        steps += 1
        if steps > tc.max_steps:
            raise Trap("step limit exceeded", c.site(pc))
        if regions:
            depth = len(stack)
            if any(r[0] == pc and r[1] == depth for r in regions):
                regions = [r for r in regions if not (r[0] == pc and r[1] == depth)]
        ss = slot_at.get(pc)
        sink_addrs = None
        if ss is not None:
            func, idx = p.instruction((c.func_of[pc], c.index_of[pc])).origin
            for kind, v in ss.sources:
                w = (counter, source_text(p, func, idx, kind, v), None)
                counter += 1
                if kind == "reg":
                    rt[v] = w
                else:
                    mt[addr_of(v)] = w
            if ss.sinks:
                sink_addrs = [addr_of(v) if kind == "mem" else None for kind, v in ss.sinks]
        ins = code[pc]
        opc = ins[0]
        et = etext[pc]
        written_reg = -1
        written_mem = -1
        npc = pc + 1
        if opc == MOV_RR:
            regs[ins[1]] = regs[ins[2]]
            if ins[1] != ins[2]:  # a self-move leaves status and witness alone
                w = rt[ins[2]]
                rt[ins[1]] = (w[0], et[0], w) if w is not None else None
            written_reg = ins[1]
        elif opc == MOV_RI:
            regs[ins[1]] = ins[2]
            rt[ins[1]] = None
            written_reg = ins[1]
        elif opc == BIN_RR:
            d, s = ins[1], ins[2]
            regs[d] = alu(ins[3], regs[d], regs[s])
            if ins[3] == "xor" and d == s:
                rt[d] = None
            else:
                rt[d] = _or(rt[d], rt[s], et[1])
            written_reg = d
        elif opc == BIN_RI:
            regs[ins[1]] = alu(ins[3], regs[ins[1]], ins[2])
            written_reg = ins[1]
        elif opc == LOAD:
            a = (regs[ins[2]] + ins[3]) & MASK64
            if a >= size:
                raise Trap(f"illegal memory access {a:#x}", c.site(pc))
            regs[ins[1]] = mem[a]
            w = mt.get(a)
            rt[ins[1]] = (w[0], et[0], w) if w is not None else None
            written_reg = ins[1]
        elif opc == STORE_R or opc == STORE_I:
            a = (regs[ins[1]] + ins[2]) & MASK64
            if a >= size:
                raise Trap(f"illegal memory access {a:#x}", c.site(pc))
            if opc == STORE_R:
                mem[a] = regs[ins[3]]
                w = rt[ins[3]]
                if w is not None:
                    mt[a] = (w[0], et[0], w)
                else:
                    mt.pop(a, None)
            else:
                mem[a] = ins[3]
                mt.pop(a, None)
            written_mem = a
        elif opc == CMP_RR or opc == CMP_RI:
            flags = (regs[ins[1]], regs[ins[2]] if opc == CMP_RR else ins[2])
            if implicit:
                wa = rt[ins[1]]
                f1 = (wa[0], et[0], wa) if wa is not None else None
                if opc == CMP_RR:
                    f1 = _or(f1, rt[ins[2]], et[1])
                flags_t = f1
        elif opc == JMP:
            npc = ins[1]
        elif opc == JCC:
            if flags is None:
                raise Trap("conditional branch without flags", c.site(pc))
            if eval_cond(ins[2], flags[0], flags[1]):
                npc = ins[1]
            if implicit and flags_t is not None:
                regions.append([end_pc[pc], len(stack),
                                (flags_t[0], f"flags@{c.site(pc)} -bl({jcc_label[pc]})-> ctrl", flags_t)])
        elif opc == PUSH_R or opc == PUSH_I:
            a = (regs[SP] - 1) & MASK64
            if a >= size:
                raise Trap(f"stack overflow {a:#x}", c.site(pc))
            regs[SP] = a
            if opc == PUSH_R:
                mem[a] = regs[ins[1]]
                w = rt[ins[1]]
                if w is not None:
                    mt[a] = (w[0], et[0], w)
                else:
                    mt.pop(a, None)
            else:
                mem[a] = ins[1]
                mt.pop(a, None)
            written_mem = a
        elif opc == POP:
            a = regs[SP]
            if a >= size:
                raise Trap(f"stack underflow {a:#x}", c.site(pc))
            regs[SP] = (a + 1) & MASK64
            regs[ins[1]] = mem[a]
            w = mt.get(a)
            rt[ins[1]] = (w[0], et[0], w) if w is not None else None
            written_reg = ins[1]
        elif opc == CALL:
            stack.append(pc + 1)
            npc = ins[1]
        elif opc == RET:
            if not stack:
                raise Trap("return with empty call stack", c.site(pc))
            npc = stack.pop()
            if regions:
                regions = [r for r in regions if r[1] <= len(stack)]
        elif opc == CALLI:
            name = ins[1]
            sm = config.summary_for(name)
            dst = regs[sm.args[0]]
            n = regs[sm.args[-1]]
            src = regs[sm.args[1]] if sm.rule != "sanitize" else 0
            run_intrinsic(name, regs, mem, c.site(pc))
            for k in range(n):
                if sm.rule == "sanitize":
                    mt.pop(dst + k, None)
                    continue
                if src + k == dst + k:
                    continue  # in-place word: status and witness unchanged
                ws = mt.get(src + k)
                e = summary_edge(name, sm.rule, src + k, dst + k)
                if sm.rule == "copy":
                    if ws is not None:
                        mt[dst + k] = (ws[0], e, ws)
                    else:
                        mt.pop(dst + k, None)
                else:
                    r = _or(mt.get(dst + k), ws, e)
                    if r is not None:
                        mt[dst + k] = r
        elif opc == HALT:
            pass
        if regions and (written_reg >= 0 or written_mem >= 0):
            depth = len(stack)
            for reg_ in regions:
                if reg_[1] != depth:
                    continue
                cw = reg_[2]
                if written_reg >= 0:
                    rt[written_reg] = _or(rt[written_reg], cw, f"ctrl -bl-> {REG_NAMES[written_reg]}@{c.site(pc)}")
                else:
                    r = _or(mt.get(written_mem), cw, f"ctrl -bl-> [{written_mem:#x}]@{c.site(pc)}")
                    if r is not None:
                        mt[written_mem] = r
        if ss is not None and ss.sinks:
            func, idx = p.instruction((c.func_of[pc], c.index_of[pc])).origin
            site = f"{func}@{idx}"
            for (kind, v), a in zip(ss.sinks, sink_addrs):
                slot = REG_NAMES[v] if kind == "reg" else str(v)
                w = rt[v] if kind == "reg" else mt.get(a)
                k = occ.get((site, slot), 0)
                occ[(site, slot)] = k + 1
                verdicts.append(SinkVerdict(site, slot, k, w is not None, witness_list(w)))
        if opc == HALT:
            break
        pc = npc
    return TaintReport(verdicts)
