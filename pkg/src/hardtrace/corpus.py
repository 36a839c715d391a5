"""Random TIR programs and inputs, plus hand-written loop-shape and data-loss programs.

Generated programs always terminate without trapping: loop counters live in r4..r6
and are saved by every helper, addresses are masked into a small window, and
push/pop pairs are balanced inside each statement.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .isa import CONDITIONS, MASK64, Program, parse_program
from .taintgraph import TaintConfig, parse_taint_config
from .tracer import MachineInput

BASE = 0x1000
WINDOW = 64
STACK_TOP = 0x8000
DATA_REGS = (0, 1, 2, 3)
COUNTERS = (5, 6, 4)
SUMMARIES = "summary memcpy copy\nsummary memor or\nsummary memzero sanitize\n"


@dataclass
class Profile:
    name: str = "mixed"
    helpers: tuple[int, int] = (0, 3)
    statements: tuple[int, int] = (6, 18)
    max_depth: int = 3
    weights: dict[str, float] = field(default_factory=lambda: {
        "arith": 4, "mem": 3, "stack": 1, "intrinsic": 1, "if": 2, "loop": 1.5, "call": 1.2})
    loop_bound: tuple[int, int] = (1, 6)
    implicit_rate: float = 0.15


MIXED = Profile()
LOOP_MEMORY = Profile("loop-memory", helpers=(0, 2), statements=(6, 14), max_depth=3,
                      weights={"arith": 2, "mem": 5, "stack": 0.5, "intrinsic": 1, "if": 1,
                               "loop": 3, "call": 0.5},
                      loop_bound=(4, 12), implicit_rate=0.0)


@dataclass
class Case:
    name: str
    program: Program
    config: TaintConfig
    text: str
    config_text: str
    profile: str


class _Gen:
    def __init__(self, rng: random.Random, prof: Profile, max_instrs: int):
        self.rng = rng
        self.prof = prof
        self.max_instrs = max_instrs
        self.labels = 0
        self.count = 0

    def label(self) -> str:
        self.labels += 1
        return f"L{self.labels}"

    def reg(self) -> str:
        return f"r{self.rng.choice(DATA_REGS)}"

    def any_src(self) -> str:
        return f"r{self.rng.choice(DATA_REGS + COUNTERS)}"

    def imm(self) -> int:
        return self.rng.choice((0, 1, 2, 3, 7, 8, 15, 16, 63, 100, 255, 0x1234))

    def addr_into(self, tmp: str, out: list[str], counters: list[int]) -> str:
        """Emit code leaving a window address in tmp; returns the memory operand."""
        rng = self.rng
        off = rng.randrange(4)
        if counters and rng.random() < 0.4:
            out.append(f"mov {tmp}, r{rng.choice(counters)}")
        else:
            out.append(f"mov {tmp}, {self.reg()}")
            out.append(f"and {tmp}, {WINDOW - 1}")
        out.append(f"add {tmp}, {BASE:#x}")
        return f"[{tmp}+{off}]" if off else f"[{tmp}]"

    def stmt(self, out: list[str], depth: int, counters: list[int], callees: list[str]) -> None:
        rng = self.rng
        w = dict(self.prof.weights)
        if depth >= self.prof.max_depth:
            w["if"] = w["loop"] = 0
        if len(counters) >= len(COUNTERS):
            w["loop"] = 0
        if not callees:
            w["call"] = 0
        kind = rng.choices(list(w), list(w.values()))[0]
        start = len(out)
        if kind == "arith":
            d = self.reg()
            c = rng.random()
            if c < 0.3:
                out.append(f"mov {d}, {self.any_src()}")
            elif c < 0.45:
                out.append(f"mov {d}, {self.imm()}")
            elif c < 0.8:
                out.append(f"{rng.choice(('add', 'sub', 'and', 'or', 'xor'))} {d}, {self.any_src()}")
            else:
                out.append(f"{rng.choice(('add', 'sub', 'and', 'or', 'xor'))} {d}, {self.imm()}")
        elif kind == "mem":
            tmp = self.reg()
            m = self.addr_into(tmp, out, counters)
            if rng.random() < 0.5:
                out.append(f"load {self.reg()}, {m}")
            else:
                v = self.any_src() if rng.random() < 0.8 else str(self.imm())
                out.append(f"store {m}, {v}")
        elif kind == "stack":
            out.append(f"push {self.any_src() if rng.random() < 0.8 else self.imm()}")
            if rng.random() < 0.5:
                out.append(f"{rng.choice(('add', 'xor'))} {self.reg()}, {self.any_src()}")
            out.append(f"pop {self.reg()}")
        elif kind == "intrinsic":
            name = rng.choice(("memcpy", "memcpy", "memor", "memzero"))
            out.append("and r0, 31")
            out.append(f"add r0, {BASE:#x}")
            out.append(f"mov r1, {BASE + rng.randrange(WINDOW - 8):#x}")
            out.append(f"mov r2, {rng.randint(1, 8)}")
            out.append(f"call {name}")
        elif kind == "if":
            a = self.any_src()
            b = self.any_src() if rng.random() < 0.5 else str(self.imm())
            cond = rng.choice(CONDITIONS)
            l_else, l_end = self.label(), self.label()
            out.append(f"cmp {a}, {b}")
            out.append(f"j{cond} {l_else}")
            self.block(out, depth + 1, counters, callees, 1, 3)
            has_else = rng.random() < 0.6
            if has_else:
                out.append(f"jmp {l_end}")
            out.append(f"{l_else}: nop_")
            if has_else:
                self.block(out, depth + 1, counters, callees, 1, 3)
                out.append(f"{l_end}: nop_")
        elif kind == "loop":
            r = next(c for c in COUNTERS if c not in counters)
            lo, hi = self.prof.loop_bound
            n = rng.randint(lo, hi)
            head, done = self.label(), self.label()
            out.append(f"mov r{r}, 0")
            if rng.random() < 0.5:
                out.append(f"{head}: cmp r{r}, {n}")
                out.append(f"jge {done}")
                self.block(out, depth + 1, counters + [r], callees, 1, 4)
                out.append(f"add r{r}, 1")
                out.append(f"jmp {head}")
                out.append(f"{done}: nop_")
            else:
                out.append(f"{head}: nop_")
                self.block(out, depth + 1, counters + [r], callees, 1, 4)
                out.append(f"add r{r}, 1")
                out.append(f"cmp r{r}, {n}")
                out.append(f"jlt {head}")
        elif kind == "call":
            out.append(f"call {rng.choice(callees)}")
        self.count += len(out) - start

    def block(self, out, depth, counters, callees, lo, hi) -> None:
        for _ in range(self.rng.randint(lo, hi)):
            if self.count > self.max_instrs:
                return
            self.stmt(out, depth, counters, callees)


def _resolve_nops(lines: list[str]) -> list[str]:
    """Labels were emitted as `L: nop_`; attach them to the next real instruction."""
    out: list[str] = []
    pending: list[str] = []
    for ln in lines:
        if ln.endswith(": nop_"):
            pending.append(ln[:-len(" nop_")])
            continue
        for lab in pending:
            out.append(lab)
        pending = []
        out.append(ln)
    return out


def _emit_function(name: str, body: list[str], terminal: str, save: bool) -> str:
    lines = [f"func {name}"]
    pre = [f"push r{r}" for r in COUNTERS] if save else []
    post = [f"pop r{r}" for r in reversed(COUNTERS)] if save else []
    code = _resolve_nops(pre + body + post + [terminal])
    for ln in code:
        if ln.endswith(":"):
            lines.append(ln)
        elif ":" in ln.split()[0]:
            lines.append(ln)
        else:
            lines.append("    " + ln)
    return "\n".join(lines)


def random_program(rng: random.Random, prof: Profile = MIXED, max_instrs: int = 400) -> str:
    n_helpers = rng.randint(*prof.helpers)
    names = [f"f{k}" for k in range(n_helpers)]
    g = _Gen(rng, prof, max_instrs)
    chunks = []
    bodies = {}
    for k in reversed(range(n_helpers)):
        body: list[str] = []
        lo, hi = prof.statements
        g.block(body, 1, [], names[k + 1:], max(1, lo // 3), max(2, hi // 3))
        bodies[names[k]] = body
    main: list[str] = []
    g.block(main, 0, [], names, *prof.statements)
    chunks.append(_emit_function("main", main, "halt", False))
    for name in names:
        chunks.append(_emit_function(name, bodies[name], "ret", True))
    return "# tir 1\n" + "\n".join(chunks) + "\n"


def random_config(rng: random.Random, p: Program, prof: Profile = MIXED) -> str:
    sites = [(f.name, i, ins) for f in p.functions.values() for i, ins in enumerate(f.instrs)]
    lines = ["# tir-taint 1"]

    def slot(ins) -> str:
        regs = sorted((set(ins.reg_uses()) | set(ins.reg_defs())) & set(DATA_REGS))
        if ins.mem_operand() is not None and rng.random() < 0.4:
            return "mem"
        if regs and rng.random() < 0.8:
            return f"r{rng.choice(regs)}"
        return f"r{rng.choice(DATA_REGS)}"

    mem_sites = [t for t in sites if t[2].mem_operand() is not None] or sites
    for _ in range(rng.randint(1, 4)):
        if rng.random() < 0.4:
            lines.append(f"source {p.entry}@0 r{rng.choice(DATA_REGS)}")
            continue
        fn, i, ins = rng.choice(sites)
        lines.append(f"source {fn}@{i} {slot(ins)}")
    for _ in range(rng.randint(2, 5)):
        fn, i, ins = rng.choice(mem_sites if rng.random() < 0.5 else sites)
        lines.append(f"sink {fn}@{i} {slot(ins)}")
    for a in sorted(rng.sample(range(WINDOW + 4), rng.randint(0, 12))):
        lines.append(f"taint {BASE + a:#x}")
    lines.append(SUMMARIES.strip())
    if rng.random() < prof.implicit_rate:
        lines.append("implicit on")
    return "\n".join(lines) + "\n"


def random_input(rng: random.Random) -> MachineInput:
    regs = []
    for r in range(7):
        c = rng.random()
        if c < 0.5:
            regs.append(rng.randrange(64))
        elif c < 0.8:
            regs.append(rng.randrange(1 << 16))
        else:
            regs.append(rng.getrandbits(64) & MASK64)
    regs.append(STACK_TOP)
    mem = {BASE + k: rng.choice((0, 1, 5, rng.getrandbits(16), rng.getrandbits(64)))
           for k in range(WINDOW + 8) if rng.random() < 0.7}
    return MachineInput(tuple(regs), mem)


def generate_case(seed: int, prof: Profile = MIXED, max_instrs: int = 400) -> Case:
    rng = random.Random(seed)
    text = random_program(rng, prof, max_instrs)
    p = parse_program(text)
    ctext = random_config(rng, p, prof)
    return Case(f"{prof.name}-{seed}", p, parse_taint_config(ctext, p), text, ctext, prof.name)


def generate_corpus(n: int, seed: int = 0, loop_memory_share: float = 0.3) -> list[Case]:
    rng = random.Random(seed)
    out = []
    for k in range(n):
        prof = LOOP_MEMORY if rng.random() < loop_memory_share else MIXED
        out.append(generate_case(rng.getrandbits(32), prof))
    return out


def random_inputs(case_seed: int, n: int) -> list[MachineInput]:
    rng = random.Random(case_seed ^ 0x5EED)
    return [random_input(rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# loop-shape programs: i=r2, j=r3, k=r4, l=r6, N=r5; a[] at BASE, T in r0

_LOOP_HEAD = """\
# tir 1
func main
    mov r2, 0
"""

LOOP_SHAPES = {
    "non-once": _LOOP_HEAD + """\
H:  cmp r2, r3
    jle NEXT
    load r0, [r2+0x1000]
NEXT: add r2, 1
    cmp r2, r5
    jle H
    halt
""",
    "reg-once": _LOOP_HEAD + """\
H:  cmp r2, r3
    jle ELSE
    load r0, [r4+0x1000]
    jmp NEXT
ELSE: load r0, [r6+0x1000]
NEXT: add r2, 1
    cmp r2, r5
    jle H
    halt
""",
    "bl-once": _LOOP_HEAD + """\
H:  load r0, [r2+0x1000]
    add r2, 1
    cmp r2, r5
    jle H
    halt
""",
    "full-once": _LOOP_HEAD + """\
H:  load r0, [r3+0x1000]
    add r2, 1
    cmp r2, r5
    jle H
    halt
""",
}


def loop_shape(kind: str, iterations: int = 1000) -> tuple[Program, TaintConfig, MachineInput]:
    p = parse_program(LOOP_SHAPES[kind])
    loads = [i for i, ins in enumerate(p["main"].instrs) if ins.op == "load"]
    lines = ["# tir-taint 1"] + [f"sink main@{i} r0" for i in loads]
    lines += [f"taint {BASE + k:#x}" for k in range(0, 8)]
    cfg = parse_taint_config("\n".join(lines) + "\n", p)
    regs = (0, 0, 0, 3, 5, iterations - 1, 6, STACK_TOP)
    mem = {BASE + k: k for k in range(16)}
    return p, cfg, MachineInput(regs, mem)


# ---------------------------------------------------------------------------
# data-loss program: tight loop whose addresses the replay can recompute

LOSS_TEXT = """\
# tir 1
func main
    mov r2, 0
    mov r1, 0
H:  mov r3, r2
    and r3, 255
    load r0, [r3+0x1000]
    or r1, r0
    store [r3+0x1100], r1
    add r2, 1
    cmp r2, {n}
    jlt H
    load r0, [r4+0x1100]
    halt
"""


def loss_program(iterations: int = 1_000_000) -> tuple[Program, TaintConfig, MachineInput]:
    p = parse_program(LOSS_TEXT.format(n=iterations))
    last = len(p["main"].instrs) - 2
    ctext = "# tir-taint 1\n" + "".join(f"taint {BASE + k:#x}\n" for k in (3, 77, 200)) + \
        f"sink main@{last} r0\nsink main@{last} mem\n"
    cfg = parse_taint_config(ctext, p)
    return p, cfg, MachineInput((0, 0, 0, 0, 5, 0, 0, STACK_TOP), {BASE + k: k * 3 for k in range(256)})
