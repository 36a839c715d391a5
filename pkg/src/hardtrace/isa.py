"""TIR: a small 64-bit register machine, its textual assembly and CFG construction."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property

MASK64 = (1 << 64) - 1
NUM_REGS = 8
SP = 7
REG_NAMES = tuple(f"r{i}" for i in range(NUM_REGS))
DEFAULT_MEMORY_WORDS = 1 << 16

CONDITIONS = ("eq", "ne", "lt", "le", "gt", "ge", "b", "ae")
BINARY_OPS = ("add", "sub", "and", "or", "xor")
TERMINATORS = frozenset({"jmp", "jcc", "ret", "halt"})
# builtin memory intrinsics: (dst=r0, src=r1, count=r2)
INTRINSICS = ("memcpy", "memor", "memzero")

TIR_MAGIC = "# tir 1"


class TirError(Exception):
    pass


class ParseError(TirError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def to_signed(v: int) -> int:
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v


def eval_cond(cond: str, a: int, b: int) -> bool:
    if cond == "eq":
        return a == b
    if cond == "ne":
        return a != b
    if cond == "b":
        return a < b
    if cond == "ae":
        return a >= b
    sa, sb = to_signed(a), to_signed(b)
    if cond == "lt":
        return sa < sb
    if cond == "le":
        return sa <= sb
    if cond == "gt":
        return sa > sb
    if cond == "ge":
        return sa >= sb
    raise ValueError(cond)


def alu(op: str, a: int, b: int) -> int:
    if op == "add":
        return (a + b) & MASK64
    if op == "sub":
        return (a - b) & MASK64
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    raise ValueError(op)


@dataclass(frozen=True)
class Operand:
    kind: str  # "reg" | "imm" | "mem"
    reg: int = -1  # register, or the base register of a memory operand
    value: int = 0  # immediate, or displacement

    @staticmethod
    def r(i: int) -> "Operand":
        return Operand("reg", i)

    @staticmethod
    def imm(v: int) -> "Operand":
        return Operand("imm", -1, v & MASK64)

    @staticmethod
    def mem(base: int, disp: int = 0) -> "Operand":
        return Operand("mem", base, disp)

    def __str__(self) -> str:
        if self.kind == "reg":
            return REG_NAMES[self.reg]
        if self.kind == "imm":
            v = to_signed(self.value)
            return hex(v) if abs(v) > 9 else str(v)
        if self.value == 0:
            return f"[{REG_NAMES[self.reg]}]"
        sign = "-" if self.value < 0 else "+"
        return f"[{REG_NAMES[self.reg]}{sign}{abs(self.value)}]"


@dataclass(frozen=True)
class Instruction:
    op: str
    operands: tuple[Operand, ...] = ()
    cond: str | None = None  # jcc only
    target: str | None = None  # jump label or callee name
    site: int | None = None  # record site id
    origin: tuple[str, int] | None = None  # (function, index) in the source program

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    @property
    def is_blockmark(self) -> bool:
        return self.op == "record" and not self.operands

    def mem_operand(self) -> Operand | None:
        for o in self.operands:
            if o.kind == "mem":
                return o
        return None

    def reg_uses(self) -> tuple[int, ...]:
        """Registers whose value is read (including address bases)."""
        op, ops = self.op, self.operands
        out: list[int] = []
        if op == "mov":
            if ops[1].kind == "reg":
                out.append(ops[1].reg)
        elif op in BINARY_OPS or op == "cmp":
            out.append(ops[0].reg)
            if ops[1].kind == "reg":
                out.append(ops[1].reg)
        elif op == "load":
            out.append(ops[1].reg)
        elif op == "store":
            out.append(ops[0].reg)
            if ops[1].kind == "reg":
                out.append(ops[1].reg)
        elif op == "push":
            out.append(SP)
            if ops[0].kind == "reg":
                out.append(ops[0].reg)
        elif op == "pop":
            out.append(SP)
        elif op in ("record", "taint_source", "taint_sink"):
            if ops:
                out.append(ops[0].reg)
        elif op == "call" and self.target in INTRINSICS:
            out.extend((0, 1, 2))
        seen: list[int] = []
        for r in out:
            if r not in seen:
                seen.append(r)
        return tuple(seen)

    def reg_defs(self) -> tuple[int, ...]:
        op = self.op
        if op in ("mov", "load") or op in BINARY_OPS:
            return (self.operands[0].reg,)
        if op == "pop":
            r = self.operands[0].reg
            return (r,) if r == SP else (r, SP)
        if op == "push":
            return (SP,)
        return ()

    def text(self) -> str:
        op = self.op
        if op == "jcc":
            return f"j{self.cond} {self.target}"
        if op in ("jmp", "call"):
            return f"{op} {self.target}"
        if op == "record":
            what = str(self.operands[0]) if self.operands else "mark"
            return f"record {what} #{self.site}"
        if not self.operands:
            return op
        return f"{op} " + ", ".join(str(o) for o in self.operands)

    def __str__(self) -> str:
        return self.text()


@dataclass(frozen=True)
class BasicBlock:
    index: int
    start: int
    end: int  # exclusive
    succs: tuple[int, ...]
    label: str

    def __contains__(self, i: int) -> bool:
        return self.start <= i < self.end


@dataclass(frozen=True, eq=False)
class Function:
    name: str
    instrs: tuple[Instruction, ...]
    labels: dict[str, int] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, Function) and self.name == other.name
                and self.instrs == other.instrs and self.labels == other.labels)

    def __hash__(self) -> int:
        return hash((self.name, self.instrs))

    def resolve(self, label: str) -> int:
        return self.labels[label]

    @cached_property
    def label_at(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for name, idx in self.labels.items():
            out.setdefault(idx, []).append(name)
        for names in out.values():
            names.sort()
        return out

    @cached_property
    def cfg(self) -> list[BasicBlock]:
        return build_cfg(self)

    @cached_property
    def block_of(self) -> list[int]:
        owner = [0] * len(self.instrs)
        for b in self.cfg:
            for i in range(b.start, b.end):
                owner[i] = b.index
        return owner

    @cached_property
    def preds(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.cfg]
        for b in self.cfg:
            for s in b.succs:
                if b.index not in out[s]:
                    out[s].append(b.index)
        return out

    def site_name(self, index: int) -> str:
        names = self.label_at.get(index)
        return names[0] if names else f"{self.name}@{index}"


@dataclass(frozen=True, eq=False)
class Program:
    functions: dict[str, Function]
    entry: str

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, Program) and self.entry == other.entry
                and list(self.functions.items()) == list(other.functions.items()))

    def __hash__(self) -> int:
        return hash((self.entry, tuple(self.functions)))

    def __getitem__(self, name: str) -> Function:
        return self.functions[name]

    @property
    def is_rewritten(self) -> bool:
        return any(ins.op == "record" for f in self.functions.values() for ins in f.instrs)

    def instruction(self, site: tuple[str, int]) -> Instruction:
        return self.functions[site[0]].instrs[site[1]]

    def origin_index(self) -> dict[tuple[str, int], tuple[str, int]]:
        """Map original (function, index) to the current position of that instruction."""
        out = {}
        for f in self.functions.values():
            for i, ins in enumerate(f.instrs):
                if ins.origin is not None:
                    out[ins.origin] = (f.name, i)
        return out

    @cached_property
    def block_ids(self) -> dict[tuple[str, int], int]:
        """Global dense numbering of blocks: (function, block index) -> id."""
        out = {}
        for f in self.functions.values():
            for b in f.cfg:
                out[(f.name, b.index)] = len(out)
        return out


# ---------------------------------------------------------------------------
# CFG


def build_cfg(f: Function) -> list[BasicBlock]:
    n = len(f.instrs)
    leaders = {0}
    for i, ins in enumerate(f.instrs):
        if ins.op in ("jmp", "jcc"):
            leaders.add(f.labels[ins.target])
        if ins.is_terminator and i + 1 < n:
            leaders.add(i + 1)
    starts = sorted(leaders)
    index_of = {s: k for k, s in enumerate(starts)}
    blocks = []
    for k, s in enumerate(starts):
        e = starts[k + 1] if k + 1 < len(starts) else n
        last = f.instrs[e - 1]
        if last.op == "jmp":
            succs = (index_of[f.labels[last.target]],)
        elif last.op == "jcc":
            succs = (index_of[e], index_of[f.labels[last.target]])
        elif last.op in ("ret", "halt"):
            succs = ()
        else:
            succs = (index_of[e],)
        blocks.append(BasicBlock(k, s, e, succs, f.site_name(s)))
    return blocks


# ---------------------------------------------------------------------------
# parsing

_LABEL_RE = re.compile(r"^([A-Za-z_.][\w.$]*)\s*:(.*)$")
_ORIGIN_RE = re.compile(r"\s@(\d+)\s*$")
_MEM_RE = re.compile(r"^\[\s*(\w+)\s*(?:([+-])\s*(\w+)\s*)?\]$")
_IDENT_RE = re.compile(r"^[A-Za-z_.][\w.$]*$")

_SHAPES = {
    "mov": ("r", "ri"),
    "load": ("r", "m"),
    "store": ("m", "ri"),
    "cmp": ("r", "ri"),
    "push": ("ri",),
    "pop": ("r",),
    "ret": (),
    "halt": (),
    "taint_source": ("rm",),
    "taint_sink": ("rm",),
}
for _op in BINARY_OPS:
    _SHAPES[_op] = ("r", "ri")


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(f"bad integer {tok!r}", line) from None


def _parse_reg(tok: str, line: int) -> int:
    tok = tok.strip()
    if tok == "sp":
        return SP
    if tok in REG_NAMES:
        return REG_NAMES.index(tok)
    raise ParseError(f"unknown register {tok!r}", line)


def _parse_operand(tok: str, line: int) -> Operand:
    tok = tok.strip()
    if not tok:
        raise ParseError("empty operand", line)
    if tok.startswith("["):
        m = _MEM_RE.match(tok)
        if not m:
            raise ParseError(f"bad memory operand {tok!r}", line)
        base = _parse_reg(m.group(1), line)
        disp = 0
        if m.group(2):
            disp = _parse_int(m.group(3), line)
            if m.group(2) == "-":
                disp = -disp
        if not -(1 << 31) <= disp < (1 << 31):
            raise ParseError("displacement out of 32-bit range", line)
        return Operand.mem(base, disp)
    if tok[0].isdigit() or tok[0] == "-":
        return Operand.imm(_parse_int(tok, line))
    return Operand.r(_parse_reg(tok, line))


def _check_shape(op: str, operands: list[Operand], line: int) -> None:
    shape = _SHAPES[op]
    if len(operands) != len(shape):
        raise ParseError(f"{op} expects {len(shape)} operand(s), got {len(operands)}", line)
    letter = {"reg": "r", "imm": "i", "mem": "m"}
    for o, allowed in zip(operands, shape):
        if letter[o.kind] not in allowed:
            raise ParseError(f"{op}: operand {o} not allowed here", line)


def _parse_instruction(body: str, line: int) -> tuple[Instruction, int | None, bool]:
    origin = None
    tagged = False
    m = _ORIGIN_RE.search(body)
    if m:
        origin = int(m.group(1))
        tagged = True
        body = body[: m.start()]
    elif body.rstrip().endswith("@-"):
        tagged = True
        body = body.rstrip()[:-2]
    body = body.strip()
    parts = body.split(None, 1)
    mnem = parts[0].lower()
    rest = parts[1].strip() if len(parts) > 1 else ""
    if mnem in ("jmp", "call") or (mnem.startswith("j") and mnem[1:] in CONDITIONS):
        if not _IDENT_RE.match(rest):
            raise ParseError(f"{mnem} needs a label", line)
        if mnem in ("jmp", "call"):
            return Instruction(mnem, target=rest), origin, tagged
        return Instruction("jcc", cond=mnem[1:], target=rest), origin, tagged
    if mnem == "record":
        toks = rest.split()
        if len(toks) != 2 or not toks[1].startswith("#"):
            raise ParseError("record syntax is 'record <reg|mark> #<site>'", line)
        site = _parse_int(toks[1][1:], line)
        ops = () if toks[0] == "mark" else (Operand.r(_parse_reg(toks[0], line)),)
        return Instruction("record", ops, site=site), origin, tagged
    if mnem not in _SHAPES:
        raise ParseError(f"unknown opcode {mnem!r}", line)
    operands = [_parse_operand(t, line) for t in _split_operands(rest)] if rest else []
    _check_shape(mnem, operands, line)
    return Instruction(mnem, tuple(operands)), origin, tagged


def _split_operands(rest: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return out


def parse_program(text: str) -> Program:
    """Parse TIR assembly. Functions start with ``func NAME``; labels are ``NAME:``."""
    functions: dict[str, Function] = {}
    entry: str | None = None
    cur_name: str | None = None
    cur_line = 0
    instrs: list[tuple[Instruction, int | None, bool, int]] = []
    labels: dict[str, int] = {}
    label_lines: dict[str, int] = {}

    def finish() -> None:
        if cur_name is None:
            return
        if not instrs:
            raise ParseError(f"function {cur_name!r} is empty", cur_line)
        any_tag = any(t for _, _, t, _ in instrs)
        built = []
        for idx, (ins, origin, _tag, ln) in enumerate(instrs):
            if ins.op in ("jmp", "jcc") and ins.target not in labels:
                raise ParseError(f"unresolved label {ins.target!r}", ln)
            o = (cur_name, origin) if origin is not None else (None if any_tag else (cur_name, idx))
            built.append(Instruction(ins.op, ins.operands, ins.cond, ins.target, ins.site, o))
        for name, idx in labels.items():
            if idx >= len(built):
                raise ParseError(f"label {name!r} at end of function", label_lines[name])
        last = built[-1]
        if last.op not in ("jmp", "ret", "halt"):
            raise ParseError(f"function {cur_name!r} falls off its end", instrs[-1][3])
        functions[cur_name] = Function(cur_name, tuple(built), dict(labels))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0] if not raw.lstrip().startswith("record") else _strip_record_comment(raw)
        line = line.strip()
        if not line:
            continue
        if line.startswith(".entry"):
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(".entry takes one function name", lineno)
            entry = parts[1]
            continue
        if line.startswith("func ") or line == "func":
            finish()
            parts = line.split()
            if len(parts) != 2 or not _IDENT_RE.match(parts[1]):
                raise ParseError("function header is 'func NAME'", lineno)
            name = parts[1]
            if name in functions or name == cur_name:
                raise ParseError(f"duplicate function {name!r}", lineno)
            if name in INTRINSICS:
                raise ParseError(f"{name!r} is a reserved intrinsic name", lineno)
            cur_name, cur_line = name, lineno
            instrs, labels, label_lines = [], {}, {}
            continue
        while True:
            m = _LABEL_RE.match(line)
            if not m or m.group(1) in ("record",):
                break
            if cur_name is None:
                raise ParseError("label outside of a function", lineno)
            name = m.group(1)
            if name in labels:
                raise ParseError(f"duplicate label {name!r}", lineno)
            labels[name] = len(instrs)
            label_lines[name] = lineno
            line = m.group(2).strip()
        if not line:
            continue
        if cur_name is None:
            raise ParseError("instruction outside of a function", lineno)
        ins, origin, tagged = _parse_instruction(line, lineno)
        instrs.append((ins, origin, tagged, lineno))
    finish()
    if not functions:
        raise ParseError("program has no functions")
    for f in functions.values():
        for ins in f.instrs:
            if ins.op == "call" and ins.target not in functions and ins.target not in INTRINSICS:
                raise ParseError(f"unresolved label {ins.target!r} (call in {f.name})")
    if entry is None:
        entry = "main" if "main" in functions else next(iter(functions))
    elif entry not in functions:
        raise ParseError(f"entry function {entry!r} not defined")
    return Program(functions, entry)


def _strip_record_comment(raw: str) -> str:
    # '#' introduces the site id inside a record; a comment needs a second '#'
    head, sep, tail = raw.partition("#")
    site, _, _ = tail.partition("#")
    return head + sep + site


def format_program(p: Program) -> str:
    out = [TIR_MAGIC]
    if p.entry != "main" or "main" not in p.functions:
        out.append(f".entry {p.entry}")
    for f in p.functions.values():
        out.append(f"func {f.name}")
        tagged = any(ins.origin != (f.name, i) for i, ins in enumerate(f.instrs))
        for i, ins in enumerate(f.instrs):
            for name in f.label_at.get(i, ()):
                out.append(f"{name}:")
            line = "    " + ins.text()
            if tagged:
                line += f"  @{ins.origin[1]}" if ins.origin is not None else "  @-"
            out.append(line)
    return "\n".join(out) + "\n"


def structurally_equal(a: Program, b: Program) -> bool:
    return a == b
