"""Taint configuration and the static per-function taint graph."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import graphs
from .isa import (BINARY_OPS, INTRINSICS, REG_NAMES, SP, Function, Instruction,
                  Operand, Program, TirError)

TAINT_MAGIC = "# tir-taint 1"
RULE_ARITY = {"copy": 3, "or": 3, "sanitize": 2}
DEFAULT_ARGS = {"copy": (0, 1, 2), "or": (0, 1, 2), "sanitize": (0, 2)}


class ConfigError(TirError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__((f"line {line}: " if line is not None else "") + message)


@dataclass(frozen=True)
class Slot:
    """A register or the memory operand of the instruction at ``site``."""
    func: str
    index: int
    kind: str  # "reg" | "mem"
    reg: int = -1

    def text(self) -> str:
        return f"{self.func}@{self.index} {REG_NAMES[self.reg] if self.kind == 'reg' else 'mem'}"


@dataclass(frozen=True)
class Summary:
    rule: str  # copy | or | sanitize
    args: tuple[int, ...]  # (dst, src, len) or (dst, len)


@dataclass
class TaintConfig:
    sources: list[Slot] = field(default_factory=list)
    sinks: list[Slot] = field(default_factory=list)
    summaries: dict[str, Summary] = field(default_factory=dict)
    tainted_memory: set[int] = field(default_factory=set)
    implicit: bool = False

    @property
    def empty(self) -> bool:
        return not (self.sources or self.sinks or self.tainted_memory)

    def validate(self, p: Program) -> None:
        for s in self.sources + self.sinks:
            f = p.functions.get(s.func)
            if f is None or not 0 <= s.index < len(f.instrs):
                raise ConfigError(f"site {s.func}@{s.index} not found")
            if s.kind == "mem" and f.instrs[s.index].mem_operand() is None:
                raise ConfigError(f"site {s.func}@{s.index} has no memory operand")
        for name in self.summaries:
            if name not in INTRINSICS:
                raise ConfigError(f"summary for unknown intrinsic {name!r}")

    def summary_for(self, name: str) -> Summary:
        try:
            return self.summaries[name]
        except KeyError:
            raise ConfigError(f"no summary registered for intrinsic {name!r}") from None

    def to_text(self) -> str:
        lines = [TAINT_MAGIC]
        lines += [f"source {s.text()}" for s in self.sources]
        lines += [f"sink {s.text()}" for s in self.sinks]
        for name, sm in self.summaries.items():
            lines.append(f"summary {name} {sm.rule} " + " ".join(REG_NAMES[r] for r in sm.args))
        lines += [f"taint {hex(a)}" for a in sorted(self.tainted_memory)]
        if self.implicit:
            lines.append("implicit on")
        return "\n".join(lines) + "\n"


_SITE_RE = re.compile(r"^([A-Za-z_.][\w.$]*)@([\w.$]+)$")


def parse_taint_config(text: str, program: Program | None = None) -> TaintConfig:
    """Line format: ``source f@i <reg|mem>``, ``sink ...``, ``summary <name> <rule> [regs]``,
    ``taint <addr>``, ``implicit on|off``. Sites may use a label instead of an index."""
    cfg = TaintConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kw = parts[0]
        if kw in ("source", "sink"):
            if len(parts) != 3:
                raise ConfigError(f"{kw} takes a site and a slot", lineno)
            m = _SITE_RE.match(parts[1])
            if not m:
                raise ConfigError(f"bad site {parts[1]!r}", lineno)
            func, idx_tok = m.groups()
            if idx_tok.isdigit():
                idx = int(idx_tok)
            else:
                if program is None or func not in program.functions:
                    raise ConfigError(f"cannot resolve site {parts[1]!r}", lineno)
                labels = program[func].labels
                if idx_tok not in labels:
                    raise ConfigError(f"unknown label {idx_tok!r}", lineno)
                idx = labels[idx_tok]
            if parts[2] == "mem":
                slot = Slot(func, idx, "mem")
            elif parts[2] in REG_NAMES:
                slot = Slot(func, idx, "reg", REG_NAMES.index(parts[2]))
            else:
                raise ConfigError(f"bad slot {parts[2]!r}", lineno)
            (cfg.sources if kw == "source" else cfg.sinks).append(slot)
        elif kw == "summary":
            if len(parts) < 3:
                raise ConfigError("summary takes a name and a rule", lineno)
            rule = parts[2]
            if rule not in RULE_ARITY:
                raise ConfigError(f"unknown summary rule {rule!r}", lineno)
            if len(parts) == 3:
                args = DEFAULT_ARGS[rule]
            else:
                if len(parts) - 3 != RULE_ARITY[rule]:
                    raise ConfigError(f"rule {rule} takes {RULE_ARITY[rule]} registers", lineno)
                try:
                    args = tuple(REG_NAMES.index(t) for t in parts[3:])
                except ValueError:
                    raise ConfigError("summary arguments must be registers", lineno) from None
            cfg.summaries[parts[1]] = Summary(rule, args)
        elif kw == "taint":
            if len(parts) != 2:
                raise ConfigError("taint takes one address", lineno)
            try:
                cfg.tainted_memory.add(int(parts[1], 0))
            except ValueError:
                raise ConfigError(f"bad address {parts[1]!r}", lineno) from None
        elif kw == "implicit":
            if len(parts) != 2 or parts[1] not in ("on", "off"):
                raise ConfigError("implicit takes on|off", lineno)
            cfg.implicit = parts[1] == "on"
        else:
            raise ConfigError(f"unknown directive {kw!r}", lineno)
    if program is not None:
        cfg.validate(program)
    return cfg


def check_summary_arity(summary: Summary) -> None:
    if summary.rule not in RULE_ARITY or len(summary.args) != RULE_ARITY[summary.rule]:
        raise ConfigError(f"summary rule {summary.rule} expects {RULE_ARITY.get(summary.rule)} arguments")


@dataclass(frozen=True)
class SiteSlots:
    """Sources and sinks attached to one original instruction.

    Sources act before the instruction executes; sinks are checked after it, with
    a memory sink's address taken before the instruction runs."""
    sources: tuple[tuple[str, object], ...] = ()
    sinks: tuple[tuple[str, object], ...] = ()


def site_slots(p: Program, config: TaintConfig) -> dict[tuple[str, int], SiteSlots]:
    """Effective sources/sinks per original site: config lines plus taint pseudo-ops."""
    src: dict[tuple[str, int], list] = {}
    snk: dict[tuple[str, int], list] = {}

    by_origin = {ins.origin: ins for f in p.functions.values() for ins in f.instrs
                 if ins.origin is not None}

    def slot_value(s: Slot):
        if s.kind == "reg":
            return ("reg", s.reg)
        return ("mem", by_origin[(s.func, s.index)].mem_operand())

    for s in config.sources:
        src.setdefault((s.func, s.index), []).append(slot_value(s))
    for s in config.sinks:
        snk.setdefault((s.func, s.index), []).append(slot_value(s))
    for f in p.functions.values():
        for i, ins in enumerate(f.instrs):
            if ins.op in ("taint_source", "taint_sink") and ins.origin is not None:
                o = ins.operands[0]
                v = ("reg", o.reg) if o.kind == "reg" else ("mem", o)
                (src if ins.op == "taint_source" else snk).setdefault(ins.origin, []).append(v)
    out = {}
    for key in set(src) | set(snk):
        out[key] = SiteSlots(tuple(src.get(key, ())), tuple(snk.get(key, ())))
    return out


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class TaintNode:
    func: str
    index: int
    slot: str  # "r3", "[r1+4]", "imm", "flags"
    polarity: str  # "use" | "def" | "mem"

    def text(self, f: Function | None = None) -> str:
        where = f.site_name(self.index) if f is not None else f"{self.func}@{self.index}"
        return f"{self.slot}@{where}({self.polarity})"


@dataclass(frozen=True)
class TaintEdge:
    src: TaintNode
    dst: TaintNode
    label: str  # a | d | o | s | bl
    block: str | None = None

    @property
    def tag(self) -> str:
        return f"bl({self.block})" if self.label == "bl" else self.label


@dataclass
class TaintGraph:
    function: Function
    edges: list[TaintEdge] = field(default_factory=list)
    site_edges: dict[int, list[int]] = field(default_factory=dict)
    marks: dict[TaintNode, set[str]] = field(default_factory=dict)

    @property
    def nodes(self) -> set[TaintNode]:
        out = set(self.marks)
        for e in self.edges:
            out.add(e.src)
            out.add(e.dst)
        return out

    def add(self, e: TaintEdge, index: int | None = None) -> int:
        self.edges.append(e)
        k = len(self.edges) - 1
        if index is not None:
            self.site_edges.setdefault(index, []).append(k)
        return k

    def edge_text(self, k: int) -> str:
        e = self.edges[k]
        return f"{e.src.text(self.function)} -{e.tag}-> {e.dst.text(self.function)}"

    def has_edge(self, src: str, label: str, dst: str) -> bool:
        for k, e in enumerate(self.edges):
            if e.tag == label and e.src.text(self.function) == src and e.dst.text(self.function) == dst:
                return True
        return False

    def dump(self) -> str:
        lines = sorted(self.edge_text(k) for k in range(len(self.edges)))
        for node, ms in sorted(self.marks.items(), key=lambda kv: (kv[0].index, kv[0].slot)):
            for m in sorted(ms):
                lines.append(f"mark {m} {node.text(self.function)}")
        return "\n".join(lines) + ("\n" if lines else "")


def _slot_name(o: Operand) -> str:
    return str(o) if o.kind != "imm" else "imm"


def instruction_edges(fname: str, i: int, ins: Instruction, implicit: bool = False) -> list[TaintEdge]:
    """Intra-instruction edges per opcode semantics."""
    op, ops = ins.op, ins.operands

    def use(r: int) -> TaintNode:
        return TaintNode(fname, i, REG_NAMES[r], "use")

    def dfn(r: int) -> TaintNode:
        return TaintNode(fname, i, REG_NAMES[r], "def")

    def mem(o: Operand) -> TaintNode:
        return TaintNode(fname, i, str(o), "mem")

    imm = TaintNode(fname, i, "imm", "use")
    out: list[TaintEdge] = []
    if op == "mov":
        if ops[1].kind == "reg":
            out.append(TaintEdge(use(ops[1].reg), dfn(ops[0].reg), "a"))
        else:
            out.append(TaintEdge(imm, dfn(ops[0].reg), "s"))
    elif op == "load":
        out.append(TaintEdge(use(ops[1].reg), mem(ops[1]), "d"))
        out.append(TaintEdge(mem(ops[1]), dfn(ops[0].reg), "a"))
    elif op == "store":
        out.append(TaintEdge(use(ops[0].reg), mem(ops[0]), "d"))
        if ops[1].kind == "reg":
            out.append(TaintEdge(use(ops[1].reg), mem(ops[0]), "a"))
        else:
            out.append(TaintEdge(imm, mem(ops[0]), "s"))
    elif op in BINARY_OPS:
        d = ops[0].reg
        if op == "xor" and ops[1].kind == "reg" and ops[1].reg == d:
            out.append(TaintEdge(imm, dfn(d), "s"))
        else:
            out.append(TaintEdge(use(d), dfn(d), "o"))
            if ops[1].kind == "reg":
                out.append(TaintEdge(use(ops[1].reg), dfn(d), "o"))
    elif op == "push":
        slot = Operand.mem(SP, -1)
        out.append(TaintEdge(use(SP), mem(slot), "d"))
        if ops[0].kind == "reg":
            out.append(TaintEdge(use(ops[0].reg), mem(slot), "a"))
        else:
            out.append(TaintEdge(imm, mem(slot), "s"))
    elif op == "pop":
        slot = Operand.mem(SP, 0)
        out.append(TaintEdge(use(SP), mem(slot), "d"))
        out.append(TaintEdge(mem(slot), dfn(ops[0].reg), "a"))
    elif op in ("taint_source", "taint_sink"):
        o = ops[0]
        if o.kind == "mem":
            out.append(TaintEdge(use(o.reg), mem(o), "d"))
    elif op == "cmp" and implicit:
        flags = TaintNode(fname, i, "flags", "def")
        out.append(TaintEdge(use(ops[0].reg), flags, "o"))
        if ops[1].kind == "reg":
            out.append(TaintEdge(use(ops[1].reg), flags, "o"))
    return out


def reaching_defs(f: Function) -> dict[tuple[int, int], set[int]]:
    """(use index, register) -> set of def indices reaching it (intra-procedural)."""
    cfg = f.cfg
    nb = len(cfg)
    gen_out: list[dict[int, int]] = []
    for b in cfg:
        last: dict[int, int] = {}
        for i in range(b.start, b.end):
            for r in f.instrs[i].reg_defs():
                last[r] = i
        gen_out.append(last)
    ins_: list[dict[int, frozenset[int]]] = [dict() for _ in range(nb)]
    changed = True
    preds = f.preds
    outs: list[dict[int, frozenset[int]]] = [dict() for _ in range(nb)]
    while changed:
        changed = False
        for b in cfg:
            merged: dict[int, set[int]] = {}
            for p in preds[b.index]:
                for r, ds in outs[p].items():
                    merged.setdefault(r, set()).update(ds)
            new_in = {r: frozenset(ds) for r, ds in merged.items()}
            ins_[b.index] = new_in
            out = dict(new_in)
            for r, i in gen_out[b.index].items():
                out[r] = frozenset({i})
            if out != outs[b.index]:
                outs[b.index] = out
                changed = True
    result: dict[tuple[int, int], set[int]] = {}
    for b in cfg:
        cur = {r: set(ds) for r, ds in ins_[b.index].items()}
        for i in range(b.start, b.end):
            ins = f.instrs[i]
            for r in ins.reg_uses():
                result[(i, r)] = set(cur.get(r, ()))
            for r in ins.reg_defs():
                cur[r] = {i}
    return result


def build_taint_graph(f: Function, config: TaintConfig, program: Program | None = None) -> TaintGraph:
    g = TaintGraph(f)
    for i, ins in enumerate(f.instrs):
        for e in instruction_edges(f.name, i, ins, config.implicit):
            g.add(e, i)
    # inter-instruction def-use flow, guarded by the use block when it is control dependent
    cfg = f.cfg
    cd = graphs.control_dependence(len(cfg), [b.succs for b in cfg])
    owner = f.block_of
    for (u, r), ds in sorted(reaching_defs(f).items()):
        for d in sorted(ds):
            ub, db = owner[u], owner[d]
            src = TaintNode(f.name, d, REG_NAMES[r], "def")
            dst = TaintNode(f.name, u, REG_NAMES[r], "use")
            if ub != db and cd.get(ub):
                g.add(TaintEdge(src, dst, "bl", cfg[ub].label))
            else:
                g.add(TaintEdge(src, dst, "a"))
    # callee entry blocks connect to the call-site argument registers
    if program is not None:
        for i, ins in enumerate(f.instrs):
            if ins.op == "call" and ins.target in program.functions:
                callee = program[ins.target]
                for r in sorted(callee_reads(program, ins.target)):
                    g.add(TaintEdge(TaintNode(f.name, i, REG_NAMES[r], "use"),
                                    TaintNode(callee.name, 0, REG_NAMES[r], "use"),
                                    "bl", callee.cfg[0].label))
    if program is not None:
        slots = site_slots(program, config)
        for (fn, idx), ss in slots.items():
            if fn != f.name:
                continue
            for kind, v in ss.sources:
                g.marks.setdefault(_mark_node(fn, idx, kind, v, "use"), set()).add("source")
            for kind, v in ss.sinks:
                pol = "def" if kind == "reg" and v in f.instrs[idx].reg_defs() else "use"
                g.marks.setdefault(_mark_node(fn, idx, kind, v, pol), set()).add("sink")
    return g


def _mark_node(fn: str, idx: int, kind: str, v, pol: str) -> TaintNode:
    if kind == "reg":
        return TaintNode(fn, idx, REG_NAMES[v], pol)
    return TaintNode(fn, idx, str(v), "mem")


def callee_reads(p: Program, name: str) -> set[int]:
    """Registers possibly read by ``name`` (transitively) before being written."""
    from .analysis import upward_exposed
    return upward_exposed(p)[name]


def build_graphs(p: Program, config: TaintConfig) -> dict[str, TaintGraph]:
    return {name: build_taint_graph(f, config, p) for name, f in p.functions.items()}
