"""Executor with a compressed packet trace, plus the reference shadow-taint interpreter."""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .isa import (BINARY_OPS, DEFAULT_MEMORY_WORDS, INTRINSICS, MASK64, NUM_REGS, REG_NAMES, SP,
                  Program, TirError, alu, eval_cond)

INPUT_MAGIC = "# tir-input 1"

# packet headers
PSB = b"\x02\x82" * 8  # 16 bytes; never appears misaligned in a packet stream
PGE_H = 0x84
PGD_H = 0x85
TNT_H = 0x90
TIP_H = 0xA0
FUP_H = 0xB0
PTW_H = 0xC0

_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")


def pkt_pge(site: int) -> bytes:
    return bytes((PGE_H,)) + _u32.pack(site)


def pkt_pgd() -> bytes:
    return bytes((PGD_H,))


def pkt_tnt(bits: list[int]) -> bytes:
    assert 1 <= len(bits) <= 6
    payload = 0
    for k, b in enumerate(bits):
        payload |= (b & 1) << k
    return bytes((TNT_H | len(bits), payload))


def pkt_tip(target: int) -> bytes:
    return bytes((TIP_H,)) + _u32.pack(target)


def pkt_fup(site: int) -> bytes:
    return bytes((FUP_H,)) + _u32.pack(site)


def pkt_ptw(value: int) -> bytes:
    return bytes((PTW_H,)) + _u64.pack(value & MASK64)


class Trap(TirError):
    def __init__(self, message: str, site: str | None = None):
        self.site = site
        super().__init__(f"{message} at {site}" if site else message)


@dataclass
class TraceConfig:
    psb_period_bytes: int = 4096
    buffer_bytes: int | None = None  # None = unbounded
    mode: str = "selective"  # selective | naive-full | none
    drain_bytes_per_step: float = 1.0  # consumer bandwidth in bounded mode
    max_steps: int = 50_000_000
    memory_words: int = DEFAULT_MEMORY_WORDS

    def __post_init__(self) -> None:
        if self.psb_period_bytes < 64:
            raise ValueError("psb_period_bytes must be >= 64")
        if self.mode not in ("selective", "naive-full", "none"):
            raise ValueError(f"unknown trace mode {self.mode!r}")
        if self.buffer_bytes is not None and self.buffer_bytes < 1:
            raise ValueError("buffer_bytes must be positive")


@dataclass
class MachineInput:
    regs: tuple[int, ...] = (0,) * NUM_REGS
    memory: dict[int, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [INPUT_MAGIC]
        for r, v in enumerate(self.regs):
            lines.append(f"reg {REG_NAMES[r]} {hex(v)}")
        addrs = sorted(self.memory)
        k = 0
        while k < len(addrs):
            start = addrs[k]
            run = [self.memory[start]]
            while k + len(run) < len(addrs) and addrs[k + len(run)] == start + len(run):
                run.append(self.memory[start + len(run)])
            lines.append(f"mem {hex(start)} " + " ".join(hex(v) for v in run))
            k += len(run)
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "MachineInput":
        regs = [0] * NUM_REGS
        mem: dict[int, int] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "reg" and len(parts) == 3 and parts[1] in REG_NAMES:
                    regs[REG_NAMES.index(parts[1])] = int(parts[2], 0) & MASK64
                elif parts[0] == "mem" and len(parts) >= 3:
                    base = int(parts[1], 0)
                    for k, t in enumerate(parts[2:]):
                        mem[base + k] = int(t, 0) & MASK64
                else:
                    raise ValueError
            except ValueError:
                raise TirError(f"input line {lineno}: cannot parse {raw!r}") from None
        return MachineInput(tuple(regs), mem)


@dataclass
class MachineState:
    regs: list[int]
    flags: tuple[int, int] | None
    memory: list[int]
    call_stack: list[int]
    pc: int
    halted: bool = False
    steps: int = 0


@dataclass
class RunResult:
    state: MachineState
    stream: bytes
    loss_count: int  # bytes of dropped packets
    packets: int = 0
    records: int = 0
    ground_truth: list[tuple] | None = None
    dropped_packets: int = 0


# ---------------------------------------------------------------------------
# compiled form

(MOV_RR, MOV_RI, LOAD, STORE_R, STORE_I, BIN_RR, BIN_RI, CMP_RR, CMP_RI, JMP, JCC, CALL, CALLI,
 RET, PUSH_R, PUSH_I, POP, REC_REG, REC_MARK, NOP, HALT) = range(21)


@dataclass
class Compiled:
    code: list[tuple]
    func_of: list[str]
    index_of: list[int]
    entry_pc: dict[str, int]
    block_id_at: dict[int, int]  # pc of a block leader -> global block id
    program: Program

    def site(self, pc: int) -> str:
        return f"{self.func_of[pc]}@{self.index_of[pc]}"


def compile_program(p: Program) -> Compiled:
    code: list[tuple] = []
    func_of: list[str] = []
    index_of: list[int] = []
    entry_pc: dict[str, int] = {}
    base = 0
    for f in p.functions.values():
        entry_pc[f.name] = base
        base += len(f.instrs)
    block_id_at = {}
    for f in p.functions.values():
        b0 = entry_pc[f.name]
        for b in f.cfg:
            block_id_at[b0 + b.start] = p.block_ids[(f.name, b.index)]
        for i, ins in enumerate(f.instrs):
            op, ops = ins.op, ins.operands
            if op == "mov":
                t = (MOV_RR, ops[0].reg, ops[1].reg) if ops[1].kind == "reg" else (MOV_RI, ops[0].reg, ops[1].value)
            elif op == "load":
                t = (LOAD, ops[0].reg, ops[1].reg, ops[1].value)
            elif op == "store":
                if ops[1].kind == "reg":
                    t = (STORE_R, ops[0].reg, ops[0].value, ops[1].reg)
                else:
                    t = (STORE_I, ops[0].reg, ops[0].value, ops[1].value)
            elif op in BINARY_OPS:
                if ops[1].kind == "reg":
                    t = (BIN_RR, ops[0].reg, ops[1].reg, op)
                else:
                    t = (BIN_RI, ops[0].reg, ops[1].value, op)
            elif op == "cmp":
                t = (CMP_RR, ops[0].reg, ops[1].reg) if ops[1].kind == "reg" else (CMP_RI, ops[0].reg, ops[1].value)
            elif op == "jmp":
                t = (JMP, b0 + f.labels[ins.target])
            elif op == "jcc":
                t = (JCC, b0 + f.labels[ins.target], ins.cond)
            elif op == "call":
                if ins.target in INTRINSICS:
                    t = (CALLI, ins.target)
                else:
                    t = (CALL, entry_pc[ins.target])
            elif op == "ret":
                t = (RET,)
            elif op == "push":
                t = (PUSH_R, ops[0].reg) if ops[0].kind == "reg" else (PUSH_I, ops[0].value)
            elif op == "pop":
                t = (POP, ops[0].reg)
            elif op == "record":
                t = (REC_REG, ins.site, ops[0].reg) if ops else (REC_MARK, ins.site)
            elif op in ("taint_source", "taint_sink"):
                t = (NOP,)
            elif op == "halt":
                t = (HALT,)
            else:  # pragma: no cover
                raise TirError(f"cannot compile {op}")
            code.append(t)
            func_of.append(f.name)
            index_of.append(i)
    return Compiled(code, func_of, index_of, entry_pc, block_id_at, p)


def run_intrinsic(name: str, regs: list[int], mem: list[int], site: str) -> None:
    dst, src, n = regs[0], regs[1], regs[2]
    size = len(mem)
    if n > size or dst + n > size or (name != "memzero" and src + n > size):
        raise Trap(f"{name} out of bounds", site)
    if name == "memcpy":
        for k in range(n):
            mem[dst + k] = mem[src + k]
    elif name == "memor":
        for k in range(n):
            mem[dst + k] |= mem[src + k]
    else:
        for k in range(n):
            mem[dst + k] = 0


# ---------------------------------------------------------------------------
# packet sink


class PacketWriter:
    """Serialises packets with periodic PSB and an optional bounded buffer.

    In bounded mode the consumer drains ``drain`` bytes per executed instruction;
    when a new packet would not fit, whole packets are dropped oldest-first."""

    def __init__(self, cfg: TraceConfig, on_bytes: Callable[[bytes], None] | None = None):
        self.period = cfg.psb_period_bytes
        self.cap = cfg.buffer_bytes
        self.drain = cfg.drain_bytes_per_step
        self.out = bytearray()
        self.on_bytes = on_bytes
        self.since_psb = 0
        self.tnt: list[int] = []
        self.loss = 0  # bytes
        self.dropped = 0  # packets
        self.packets = 0
        self.buf: deque[list] = deque()  # [packet, remaining]
        self.occ = 0.0
        self.last_step = 0

    def _deliver(self, pkt: bytes) -> None:
        if self.on_bytes is not None:
            self.on_bytes(pkt)
        else:
            self.out += pkt

    def _advance(self, step: int) -> None:
        credit = (step - self.last_step) * self.drain
        self.last_step = step
        buf = self.buf
        while credit > 0 and buf:
            head = buf[0]
            take = min(credit, head[1])
            head[1] -= take
            credit -= take
            self.occ -= take
            if head[1] <= 1e-9:
                buf.popleft()
                self._deliver(head[0])
        if not buf:
            self.occ = 0.0

    def _lose(self, size: int) -> None:
        self.loss += size
        self.dropped += 1

    def _push(self, pkt: bytes, step: int) -> None:
        self.packets += 1
        if self.cap is None:
            self._deliver(pkt)
            return
        self._advance(step)
        size = len(pkt)
        if size > self.cap:
            self._lose(size)
            return
        while self.occ + size > self.cap:
            # drop the oldest packet nobody has started reading
            victim = None
            for k, entry in enumerate(self.buf):
                if entry[1] == len(entry[0]):
                    victim = k
                    break
            if victim is None:
                self._lose(size)
                return
            entry = self.buf[victim]
            del self.buf[victim]
            self.occ -= entry[1]
            self._lose(len(entry[0]))
        self.buf.append([pkt, size])
        self.occ += size

    def _group(self, pkts: list[bytes], step: int) -> None:
        glen = sum(len(p) for p in pkts)
        if self.since_psb + glen > self.period:
            self._push(PSB, step)
            self.since_psb = len(PSB)
        for p in pkts:
            self._push(p, step)
        self.since_psb += glen

    def _flush_tnt(self, step: int) -> None:
        if self.tnt:
            bits, self.tnt = self.tnt, []
            self._group([pkt_tnt(bits)], step)

    def start(self, step: int = 0) -> None:
        self._push(PSB, step)
        self.since_psb = len(PSB)
        self._group([pkt_pge(0)], step)

    def branch(self, taken: bool, step: int) -> None:
        self.tnt.append(1 if taken else 0)
        if len(self.tnt) == 6:
            self._flush_tnt(step)

    def emit(self, pkts: list[bytes], step: int) -> None:
        self._flush_tnt(step)
        self._group(pkts, step)

    def finish(self, step: int) -> None:
        self._flush_tnt(step)
        self._group([pkt_pgd()], step)
        if self.cap is not None:
            self._advance(step)
            while self.buf:
                self._deliver(self.buf.popleft()[0])
            self.occ = 0.0


# ---------------------------------------------------------------------------
# execution


def initial_state(c: Compiled, inp: MachineInput, memory_words: int) -> MachineState:
    mem = [0] * memory_words
    for a, v in inp.memory.items():
        if not 0 <= a < memory_words:
            raise Trap(f"input memory address {a:#x} out of range")
        mem[a] = v & MASK64
    regs = [v & MASK64 for v in inp.regs]
    regs += [0] * (NUM_REGS - len(regs))
    return MachineState(regs, None, mem, [], c.entry_pc[c.program.entry])


def execute(p: Program, inp: MachineInput, cfg: TraceConfig | None = None, *,
            compiled: Compiled | None = None, debug: bool = False,
            on_bytes: Callable[[bytes], None] | None = None) -> RunResult:
    """Run ``p`` and produce its packet stream.

    Register records emit FUP+PTW and block marks emit FUP. ``naive-full`` mode
    additionally emits a TNT bit per conditional branch and a TIP per return."""
    cfg = cfg or TraceConfig()
    c = compiled or compile_program(p)
    st = initial_state(c, inp, cfg.memory_words)
    code = c.code
    regs, mem = st.regs, st.memory
    size = len(mem)
    stack = st.call_stack
    tracing = cfg.mode != "none"
    naive = cfg.mode == "naive-full"
    w = PacketWriter(cfg, on_bytes)
    truth: list[tuple] | None = [] if debug else None
    if tracing:
        w.start()
    flags = None
    pc = st.pc
    steps = 0
    limit = cfg.max_steps
    records = 0
    while True:
        steps += 1
        if steps > limit:
            raise Trap("step limit exceeded", c.site(pc))
        ins = code[pc]
        opc = ins[0]
        if opc == BIN_RI:
            regs[ins[1]] = alu(ins[3], regs[ins[1]], ins[2])
            pc += 1
        elif opc == CMP_RR:
            flags = (regs[ins[1]], regs[ins[2]])
            pc += 1
        elif opc == CMP_RI:
            flags = (regs[ins[1]], ins[2])
            pc += 1
        elif opc == JCC:
            if flags is None:
                raise Trap("conditional branch without flags", c.site(pc))
            taken = eval_cond(ins[2], flags[0], flags[1])
            if naive:
                w.branch(taken, steps)
                if truth is not None:
                    truth.append(("branch", int(taken)))
            pc = ins[1] if taken else pc + 1
        elif opc == MOV_RR:
            regs[ins[1]] = regs[ins[2]]
            pc += 1
        elif opc == MOV_RI:
            regs[ins[1]] = ins[2]
            pc += 1
        elif opc == BIN_RR:
            regs[ins[1]] = alu(ins[3], regs[ins[1]], regs[ins[2]])
            pc += 1
        elif opc == LOAD:
            a = (regs[ins[2]] + ins[3]) & MASK64
            if a >= size:
                raise Trap(f"illegal memory access {a:#x}", c.site(pc))
            regs[ins[1]] = mem[a]
            pc += 1
        elif opc == STORE_R or opc == STORE_I:
            a = (regs[ins[1]] + ins[2]) & MASK64
            if a >= size:
                raise Trap(f"illegal memory access {a:#x}", c.site(pc))
            mem[a] = regs[ins[3]] if opc == STORE_R else ins[3]
            pc += 1
        elif opc == JMP:
            pc = ins[1]
        elif opc == REC_REG or opc == REC_MARK:
            records += 1
            if tracing:
                if opc == REC_REG:
                    w.emit([pkt_fup(ins[1]), pkt_ptw(regs[ins[2]])], steps)
                else:
                    w.emit([pkt_fup(ins[1])], steps)
            if truth is not None:
                truth.append(("reg", ins[1], regs[ins[2]]) if opc == REC_REG else ("block", ins[1]))
            pc += 1
        elif opc == PUSH_R or opc == PUSH_I:
            a = (regs[SP] - 1) & MASK64
            if a >= size:
                raise Trap(f"stack overflow {a:#x}", c.site(pc))
            regs[SP] = a
            mem[a] = regs[ins[1]] if opc == PUSH_R else ins[1]
            pc += 1
        elif opc == POP:
            a = regs[SP]
            if a >= size:
                raise Trap(f"stack underflow {a:#x}", c.site(pc))
            regs[SP] = (a + 1) & MASK64
            regs[ins[1]] = mem[a]
            pc += 1
        elif opc == CALL:
            stack.append(pc + 1)
            pc = ins[1]
        elif opc == RET:
            if not stack:
                raise Trap("return with empty call stack", c.site(pc))
            pc = stack.pop()
            if naive:
                w.emit([pkt_tip(pc)], steps)
                if truth is not None:
                    truth.append(("tip", pc))
        elif opc == CALLI:
            run_intrinsic(ins[1], regs, mem, c.site(pc))
            pc += 1
        elif opc == NOP:
            pc += 1
        elif opc == HALT:
            break
    if tracing:
        w.finish(steps)
    st.pc = pc
    st.flags = flags
    st.halted = True
    st.steps = steps
    return RunResult(st, bytes(w.out), w.loss, w.packets, records, truth, w.dropped)


def shadow_values(p: Program, inp: MachineInput, memory_words: int = DEFAULT_MEMORY_WORDS,
                  max_steps: int = 5_000_000):
    """Yield (function, index, registers, memory) before every executed instruction.

    ``memory`` is the live word list; read it before advancing the generator."""
    c = compile_program(p)
    st = initial_state(c, inp, memory_words)
    regs, mem, stack = st.regs, st.memory, st.call_stack
    pc = st.pc
    flags = None
    for _ in range(max_steps):
        yield c.func_of[pc], c.index_of[pc], tuple(regs), mem
        ins = c.code[pc]
        if ins[0] == HALT:
            return
        pc, flags = _step(c, ins, pc, regs, mem, stack, flags)
    raise Trap("step limit exceeded")


def _step(c, ins, pc, regs, mem, stack, flags):
    opc = ins[0]
    size = len(mem)
    if opc == MOV_RR:
        regs[ins[1]] = regs[ins[2]]
    elif opc == MOV_RI:
        regs[ins[1]] = ins[2]
    elif opc == BIN_RR:
        regs[ins[1]] = alu(ins[3], regs[ins[1]], regs[ins[2]])
    elif opc == BIN_RI:
        regs[ins[1]] = alu(ins[3], regs[ins[1]], ins[2])
    elif opc == LOAD:
        a = (regs[ins[2]] + ins[3]) & MASK64
        if a >= size:
            raise Trap(f"illegal memory access {a:#x}", c.site(pc))
        regs[ins[1]] = mem[a]
    elif opc == STORE_R or opc == STORE_I:
        a = (regs[ins[1]] + ins[2]) & MASK64
        if a >= size:
            raise Trap(f"illegal memory access {a:#x}", c.site(pc))
        mem[a] = regs[ins[3]] if opc == STORE_R else ins[3]
    elif opc == CMP_RR:
        return pc + 1, (regs[ins[1]], regs[ins[2]])
    elif opc == CMP_RI:
        return pc + 1, (regs[ins[1]], ins[2])
    elif opc == JMP:
        return ins[1], flags
    elif opc == JCC:
        if flags is None:
            raise Trap("conditional branch without flags", c.site(pc))
        return (ins[1] if eval_cond(ins[2], flags[0], flags[1]) else pc + 1), flags
    elif opc == CALL:
        stack.append(pc + 1)
        return ins[1], flags
    elif opc == RET:
        if not stack:
            raise Trap("return with empty call stack", c.site(pc))
        return stack.pop(), flags
    elif opc == PUSH_R or opc == PUSH_I:
        a = (regs[SP] - 1) & MASK64
        if a >= size:
            raise Trap(f"stack overflow {a:#x}", c.site(pc))
        regs[SP] = a
        mem[a] = regs[ins[1]] if opc == PUSH_R else ins[1]
    elif opc == POP:
        a = regs[SP]
        if a >= size:
            raise Trap(f"stack underflow {a:#x}", c.site(pc))
        regs[SP] = (a + 1) & MASK64
        regs[ins[1]] = mem[a]
    elif opc == CALLI:
        run_intrinsic(ins[1], regs, mem, c.site(pc))
    return pc + 1, flags


def reference_dta(p, inp, config, trace_cfg=None):
    """Full reference shadow-taint run; see :mod:`hardtrace.oracle`."""
    from .oracle import reference_dta as run
    return run(p, inp, config, trace_cfg)
