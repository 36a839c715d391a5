"""Static identification of the trace points needed to replay taint propagation.

Pieces: value-flow graph, must value-set analysis, register identification over
weakly connected components, taint-unchanged blocks with dominance-based block
selection, function elimination, loop classification, and the plan builder that
composes them and checks replayability of the result.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import networkx as nx

from . import graphs
from .isa import (BINARY_OPS, INTRINSICS, MASK64, NUM_REGS, REG_NAMES, SP, Function, Instruction,
                  Operand, Program, alu)
from .taintgraph import TaintConfig, site_slots

ALL_REGS = frozenset(range(NUM_REGS))
FLAGS_BIT = 1 << NUM_REGS
ALL_KNOWN = (1 << (NUM_REGS + 1)) - 1


# ---------------------------------------------------------------------------
# program-level summaries


def _callees(f: Function) -> set[str]:
    return {ins.target for ins in f.instrs if ins.op == "call" and ins.target not in INTRINSICS}


def mod_sets(p: Program) -> dict[str, frozenset[int]]:
    """Registers possibly written by each function, including its callees."""
    return _mod_sets(p)


@lru_cache(maxsize=256)
def _mod_sets(p: Program) -> dict[str, frozenset[int]]:
    local = {}
    for name, f in p.functions.items():
        s = set()
        for ins in f.instrs:
            s.update(ins.reg_defs())
        local[name] = s
    changed = True
    while changed:
        changed = False
        for name, f in p.functions.items():
            for c in _callees(f):
                if not local[c] <= local[name]:
                    local[name] |= local[c]
                    changed = True
    return {k: frozenset(v) for k, v in local.items()}


@lru_cache(maxsize=256)
def upward_exposed(p: Program) -> dict[str, frozenset[int]]:
    """Registers whose value a function may read before writing them (transitively)."""
    result = {name: frozenset() for name in p.functions}
    changed = True
    while changed:
        changed = False
        for name, f in p.functions.items():
            live = _backward_live(f, lambda ins: _reads_for_exposure(ins, result), lambda ins: ins.reg_defs(),
                                  exit_live=frozenset())
            s = frozenset(live[0])
            if s != result[name]:
                result[name] = s
                changed = True
    return result


def _reads_for_exposure(ins: Instruction, exposed) -> tuple[int, ...]:
    if ins.op == "call" and ins.target not in INTRINSICS:
        return tuple(exposed[ins.target])
    return ins.reg_uses()


def _backward_live(f: Function, uses, defs, exit_live=frozenset(), ret_live=frozenset()) -> list[set[int]]:
    """Classic backward liveness; returns live-in set per instruction."""
    cfg = f.cfg
    n = len(f.instrs)
    live_in: list[set[int]] = [set() for _ in range(n)]
    block_in: list[set[int]] = [set() for _ in cfg]
    changed = True
    while changed:
        changed = False
        for b in reversed(cfg):
            last = f.instrs[b.end - 1]
            if last.op == "halt":
                cur = set(exit_live)
            elif last.op == "ret":
                cur = set(ret_live)
            else:
                cur = set()
                for s in b.succs:
                    cur |= block_in[s]
            for i in range(b.end - 1, b.start - 1, -1):
                ins = f.instrs[i]
                for r in defs(ins):
                    cur.discard(r)
                cur.update(uses(ins))
                live_in[i] = set(cur)
            if cur != block_in[b.index]:
                block_in[b.index] = cur
                changed = True
    return live_in


@dataclass(frozen=True)
class MayTaint:
    regs: frozenset[int]
    mem: bool

    @property
    def any(self) -> bool:
        return bool(self.regs) or self.mem


def may_taint(p: Program, config: TaintConfig) -> MayTaint:
    """Flow-insensitive over-approximation of cells that can ever be tainted."""
    slots = site_slots(p, config)
    regs: set[int] = set()
    mem = bool(config.tainted_memory)
    for ss in slots.values():
        for kind, v in ss.sources:
            if kind == "reg":
                regs.add(v)
            else:
                mem = True
    if config.implicit and (regs or mem):
        return MayTaint(ALL_REGS, True)
    changed = True
    while changed:
        changed = False
        for f in p.functions.values():
            for ins in f.instrs:
                op, ops = ins.op, ins.operands
                new_r: int | None = None
                if op == "mov" and ops[1].kind == "reg" and ops[1].reg in regs:
                    new_r = ops[0].reg
                elif op in BINARY_OPS and ops[1].kind == "reg" and ops[1].reg in regs \
                        and not (op == "xor" and ops[1].reg == ops[0].reg):
                    new_r = ops[0].reg
                elif op in ("load", "pop") and mem:
                    new_r = ops[0].reg
                elif op == "store" and ops[1].kind == "reg" and ops[1].reg in regs and not mem:
                    mem = True
                    changed = True
                elif op == "push" and ops[0].kind == "reg" and ops[0].reg in regs and not mem:
                    mem = True
                    changed = True
                if new_r is not None and new_r not in regs:
                    regs.add(new_r)
                    changed = True
    return MayTaint(frozenset(regs), mem)


@dataclass
class ProgramFacts:
    """Facts shared by the analyses: may-taint, taint liveness and access relevance."""
    program: Program
    config: TaintConfig
    may: MayTaint
    live_after: dict[str, list[frozenset[int]]]
    relevant: dict[str, set[int]]  # instruction indices whose memory access matters
    slots: dict
    mods: dict[str, frozenset[int]]


def taint_reads(ins: Instruction, exposed, config: TaintConfig, sink_regs: set[int]) -> set[int]:
    op, ops = ins.op, ins.operands
    out: set[int] = set(sink_regs)
    if op == "mov" and ops[1].kind == "reg":
        out.add(ops[1].reg)
    elif op in BINARY_OPS:
        if not (op == "xor" and ops[1].kind == "reg" and ops[1].reg == ops[0].reg):
            out.add(ops[0].reg)
            if ops[1].kind == "reg":
                out.add(ops[1].reg)
    elif op == "store" and ops[1].kind == "reg":
        out.add(ops[1].reg)
    elif op == "push" and ops[0].kind == "reg":
        out.add(ops[0].reg)
    elif op == "call" and ins.target not in INTRINSICS:
        out |= exposed[ins.target]
    elif op == "cmp" and config.implicit:
        out.add(ops[0].reg)
        if ops[1].kind == "reg":
            out.add(ops[1].reg)
    return out


def taint_defs(ins: Instruction) -> tuple[int, ...]:
    if ins.op == "push":
        return ()
    if ins.op == "pop":
        return (ins.operands[0].reg,)
    return ins.reg_defs()


def program_facts(p: Program, config: TaintConfig) -> ProgramFacts:
    return _program_facts(p, _config_key(config), config)


def _config_key(config: TaintConfig):
    return (tuple(config.sources), tuple(config.sinks), tuple(sorted(config.summaries.items())),
            tuple(sorted(config.tainted_memory)), config.implicit)


_FACTS_CACHE: dict = {}


def _program_facts(p: Program, key, config: TaintConfig) -> ProgramFacts:
    ck = (id(p), key)
    hit = _FACTS_CACHE.get(ck)
    if hit is not None and hit.program is p:
        return hit
    may = may_taint(p, config)
    slots = site_slots(p, config)
    exposed = upward_exposed(p)
    live_after: dict[str, list[frozenset[int]]] = {}
    relevant: dict[str, set[int]] = {}
    for name, f in p.functions.items():
        sink_regs_at = {}
        for i, ins in enumerate(f.instrs):
            ss = slots.get(ins.origin) if ins.origin is not None else None
            sink_regs_at[i] = {v for kind, v in ss.sinks if kind == "reg"} if ss else set()
        entry_fn = name == p.entry
        ret_live = frozenset() if entry_fn else ALL_REGS
        # sinks are checked after the instruction, so they read the post-state
        n = len(f.instrs)
        cfg = f.cfg
        after: list[set[int]] = [set() for _ in range(n)]
        block_in: list[set[int]] = [set() for _ in cfg]
        changed = True
        while changed:
            changed = False
            for b in reversed(cfg):
                last = f.instrs[b.end - 1]
                if last.op == "halt":
                    cur: set[int] = set()
                elif last.op == "ret":
                    cur = set(ret_live)
                else:
                    cur = set()
                    for s in b.succs:
                        cur |= block_in[s]
                for i in range(b.end - 1, b.start - 1, -1):
                    ins = f.instrs[i]
                    cur |= sink_regs_at[i]
                    after[i] = set(cur)
                    for r in taint_defs(ins):
                        cur.discard(r)
                    cur |= taint_reads(ins, exposed, config, set())
                if cur != block_in[b.index]:
                    block_in[b.index] = cur
                    changed = True
        live_after[name] = [frozenset(s) for s in after]
        rel = set()
        for i, ins in enumerate(f.instrs):
            ss = slots.get(ins.origin) if ins.origin is not None else None
            has_mem_slot = bool(ss) and any(k == "mem" for k, _ in ss.sources + ss.sinks)
            if has_mem_slot:
                rel.add(i)
                continue
            if not may.mem:
                continue
            op = ins.op
            if op in ("store", "push"):
                rel.add(i)
            elif op in ("load", "pop") and ins.operands[0].reg in after[i]:
                rel.add(i)
            elif op == "call" and ins.target in INTRINSICS:
                rel.add(i)
        relevant[name] = rel
    facts = ProgramFacts(p, config, may, live_after, relevant, slots, mod_sets(p))
    if len(_FACTS_CACHE) > 64:
        _FACTS_CACHE.clear()
    _FACTS_CACHE[ck] = facts
    return facts


def address_regs(ins: Instruction, config: TaintConfig, slot_mem: bool = False) -> tuple[int, ...]:
    """Registers whose values the replay needs to resolve this instruction's memory effects."""
    op = ins.op
    if op in ("load",):
        return (ins.operands[1].reg,)
    if op == "store":
        return (ins.operands[0].reg,)
    if op in ("push", "pop"):
        return (SP,)
    if op == "call" and ins.target in INTRINSICS:
        sm = config.summaries.get(ins.target)
        return tuple(sm.args) if sm is not None else (0, 1, 2)
    if slot_mem:
        m = ins.mem_operand()
        return (m.reg,) if m is not None else ()
    return ()


# ---------------------------------------------------------------------------
# value-flow graph


@dataclass(frozen=True)
class RegPoint:
    """Record register `reg` at instruction `index` of `func`, before or after it."""
    func: str
    index: int
    reg: int
    before: bool = False


@dataclass
class ValueFlowGraph:
    """Nodes: ("e", r) entry value, ("u", i, r) use, ("d", i, r) def, ("m", i) memory occurrence.

    Edge attribute `kind` is "v" (value), "a" (address) or "alias" (must-alias value edge)."""
    func: Function
    graph: nx.DiGraph
    relevant: set[int]  # instruction indices of relevant memory occurrences

    def address_edges(self):
        return [(u, v) for u, v, k in self.graph.edges(data="kind") if k == "a"]

    def value_edges(self):
        return [(u, v) for u, v, k in self.graph.edges(data="kind") if k != "a"]

    def def_use_pairs(self) -> set[tuple[int, int, int]]:
        """(def index, use index, reg) for every def->use value edge; ENTRY defs use index -1."""
        out = set()
        for u, v, k in self.graph.edges(data="kind"):
            if k == "v" and v[0] == "u" and u[0] in ("d", "e"):
                out.add((u[1] if u[0] == "d" else -1, v[1], v[2]))
        return out


def _vfg_defs(ins: Instruction, mods) -> list[tuple[int, list[int]]]:
    """(defined reg, regs whose use at this instruction flows into it)."""
    op, ops = ins.op, ins.operands
    if op == "mov":
        return [(ops[0].reg, [ops[1].reg] if ops[1].kind == "reg" else [])]
    if op in BINARY_OPS:
        d = ops[0].reg
        if op == "xor" and ops[1].kind == "reg" and ops[1].reg == d:
            return [(d, [])]
        return [(d, [d] + ([ops[1].reg] if ops[1].kind == "reg" and ops[1].reg != d else []))]
    if op == "load":
        return [(ops[0].reg, [])]
    if op == "push":
        return [(SP, [SP])]
    if op == "pop":
        r = ops[0].reg
        return [(r, [])] if r == SP else [(r, []), (SP, [SP])]
    if op == "call" and ins.target not in INTRINSICS:
        return [(r, []) for r in sorted(mods[ins.target])]
    return []


def _mem_bases(ins: Instruction) -> tuple[int, ...]:
    op = ins.op
    if op == "call" and ins.target in INTRINSICS:
        return (0, 1, 2)
    if op in ("push", "pop"):
        return (SP,)
    m = ins.mem_operand()
    if m is not None and op != "record":
        return (m.reg,)
    return ()


def _reaching_occurrences(f: Function, mods) -> list[dict[int, frozenset]]:
    """Per instruction, for each register the set of occurrence nodes reaching it."""
    cfg = f.cfg
    n = len(f.instrs)
    entry_state = {r: frozenset({("e", r)}) for r in range(NUM_REGS)}
    block_in: list[dict | None] = [None] * len(cfg)
    block_in[0] = entry_state
    before: list[dict | None] = [None] * n
    work = [0]
    while work:
        bi = work.pop()
        state = dict(block_in[bi])
        b = cfg[bi]
        for i in range(b.start, b.end):
            before[i] = dict(state)
            ins = f.instrs[i]
            for r in ins.reg_uses():
                state[r] = frozenset({("u", i, r)})
            for d, _ in _vfg_defs(ins, mods):
                state[d] = frozenset({("d", i, d)})
        for s in b.succs:
            cur = block_in[s]
            if cur is None:
                block_in[s] = state
                work.append(s)
                continue
            merged = {r: cur[r] | state[r] for r in range(NUM_REGS)}
            if merged != cur:
                block_in[s] = merged
                work.append(s)
    return before


def build_vfg(f: Function, p: Program | None = None, facts: ProgramFacts | None = None,
              mvsa: bool = True) -> ValueFlowGraph:
    mods = mod_sets(p) if p is not None else {}
    g = nx.DiGraph()
    before = _reaching_occurrences(f, mods)
    for r in range(NUM_REGS):
        g.add_node(("e", r))
    for i, ins in enumerate(f.instrs):
        if before[i] is None:
            continue  # unreachable
        state = before[i]
        for r in ins.reg_uses():
            u = ("u", i, r)
            g.add_node(u)
            for src in state[r]:
                g.add_edge(src, u, kind="v")
        for d, srcs in _vfg_defs(ins, mods):
            dn = ("d", i, d)
            g.add_node(dn)
            for s in srcs:
                g.add_edge(("u", i, s), dn, kind="v")
        bases = _mem_bases(ins)
        if bases:
            m = ("m", i)
            g.add_node(m)
            for r in bases:
                g.add_edge(("u", i, r), m, kind="a")
    if facts is not None:
        relevant = set(facts.relevant[f.name])
    else:
        relevant = {i for i, ins in enumerate(f.instrs) if _mem_bases(ins)}
    vfg = ValueFlowGraph(f, g, relevant)
    if mvsa and p is not None:
        res = run_mvsa(f, p, before)
        for u, v in res.alias_edges:
            if not g.has_edge(u, v):
                g.add_edge(u, v, kind="alias")
    return vfg


# ---------------------------------------------------------------------------
# must value-set analysis


class _Lattice:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name


TOP = _Lattice("Top")
BOTTOM = _Lattice("Bottom")


def meet(a, b):
    if a is TOP:
        return b
    if b is TOP:
        return a
    if a is BOTTOM or b is BOTTOM:
        return BOTTOM
    return a if a == b else BOTTOM


@dataclass
class MvsaResult:
    """Register and constant-address memory facts before each reachable instruction."""
    regs_before: list[tuple | None]
    mem_before: list[dict[int, int] | None]
    alias_edges: list[tuple]

    def known(self, i: int, r: int) -> int | None:
        st = self.regs_before[i]
        if st is None:
            return None
        v = st[r]
        return v if isinstance(v, int) else None


def _mvsa_step(ins: Instruction, regs: list, mem: dict[int, int], mods) -> None:
    op, ops = ins.op, ins.operands

    def val(o: Operand):
        return o.value & MASK64 if o.kind == "imm" else regs[o.reg]

    if op == "mov":
        regs[ops[0].reg] = val(ops[1])
    elif op in BINARY_OPS:
        d = ops[0].reg
        if op == "xor" and ops[1].kind == "reg" and ops[1].reg == d:
            regs[d] = 0
            return
        a, b = regs[d], val(ops[1])
        if isinstance(a, int) and isinstance(b, int):
            regs[d] = alu(op, a, b)
        elif a is BOTTOM or b is BOTTOM:
            regs[d] = BOTTOM
        else:
            regs[d] = TOP
    elif op == "load":
        base = regs[ops[1].reg]
        if isinstance(base, int):
            regs[ops[0].reg] = mem.get((base + ops[1].value) & MASK64, BOTTOM)
        else:
            regs[ops[0].reg] = BOTTOM
    elif op == "store":
        base = regs[ops[0].reg]
        v = val(ops[1])
        if isinstance(base, int):
            a = (base + ops[0].value) & MASK64
            if isinstance(v, int):
                mem[a] = v
            else:
                mem.pop(a, None)
        else:
            mem.clear()
    elif op == "push":
        sp = regs[SP]
        v = val(ops[0])
        if isinstance(sp, int):
            a = (sp - 1) & MASK64
            if isinstance(v, int):
                mem[a] = v
            else:
                mem.pop(a, None)
            regs[SP] = a
        else:
            mem.clear()
    elif op == "pop":
        sp = regs[SP]
        r = ops[0].reg
        if isinstance(sp, int):
            v = mem.get(sp, BOTTOM)
            regs[SP] = (sp + 1) & MASK64
            regs[r] = v
        else:
            regs[r] = BOTTOM
    elif op == "call":
        mem.clear()
        if ins.target not in INTRINSICS:
            for r in mods[ins.target]:
                regs[r] = BOTTOM


def run_mvsa(f: Function, p: Program, reaching: list | None = None) -> MvsaResult:
    """Constant propagation over registers and constant-address memory words.

    Registers start Bottom at function entry; memory is only Known after a store
    with a Known address and value."""
    mods = mod_sets(p)
    cfg = f.cfg
    n = len(f.instrs)
    block_in: list[tuple | None] = [None] * len(cfg)
    block_in[0] = (tuple([BOTTOM] * NUM_REGS), {})
    regs_before: list[tuple | None] = [None] * n
    mem_before: list[dict | None] = [None] * n
    work = [0]
    while work:
        bi = work.pop(0)
        r0, m0 = block_in[bi]
        regs, mem = list(r0), dict(m0)
        b = cfg[bi]
        for i in range(b.start, b.end):
            regs_before[i] = tuple(regs)
            mem_before[i] = dict(mem)
            _mvsa_step(f.instrs[i], regs, mem, mods)
        out = (tuple(regs), mem)
        for s in b.succs:
            cur = block_in[s]
            if cur is None:
                block_in[s] = (out[0], dict(out[1]))
                work.append(s)
                continue
            nr = tuple(meet(a, c) for a, c in zip(cur[0], out[0]))
            nm = {a: v for a, v in cur[1].items() if out[1].get(a) == v}
            if nr != cur[0] or nm != cur[1]:
                block_in[s] = (nr, nm)
                if s not in work:
                    work.append(s)
    if reaching is None:
        reaching = _reaching_occurrences(f, mods)
    alias = []
    for i, ins in enumerate(f.instrs):
        if regs_before[i] is None:
            continue
        defs = _vfg_defs(ins, mods)
        if not defs:
            continue
        regs, mem = list(regs_before[i]), dict(mem_before[i])
        _mvsa_step(ins, regs, mem, mods)
        defined = {d for d, _ in defs}
        for d in defined:
            v = regs[d]
            if not isinstance(v, int):
                continue
            for r2 in range(NUM_REGS):
                if r2 in defined or regs[r2] != v or not isinstance(regs[r2], int):
                    continue
                occ = reaching[i][r2]
                if r2 in ins.reg_uses():
                    occ = frozenset({("u", i, r2)})
                if len(occ) == 1:
                    alias.append((next(iter(occ)), ("d", i, d)))
    return MvsaResult(regs_before, mem_before, alias)


# ---------------------------------------------------------------------------
# register identification


def _host_defines(ins: Instruction, r: int, mods) -> bool:
    if ins.op == "call" and ins.target not in INTRINSICS:
        return True  # records never move across user calls
    return r in ins.reg_defs()


def use_point(f: Function, i: int, r: int, mods) -> RegPoint:
    """Where to record the value register r has when instruction i reads it."""
    return RegPoint(f.name, i, r, before=_host_defines(f.instrs[i], r, mods))


def identify_registers(vfg: ValueFlowGraph, p: Program | None = None) -> set[RegPoint]:
    f = vfg.func
    mods = mod_sets(p) if p is not None else {}
    g = vfg.graph
    out: set[RegPoint] = set()
    wccs = nx.weakly_connected_components(g)
    vg = nx.DiGraph()
    vg.add_nodes_from(n for n in g.nodes if n[0] != "m")
    vg.add_edges_from((u, v) for u, v, k in g.edges(data="kind") if k != "a")
    # nodes with a directed path to a relevant access; a root outside this set only
    # joined the component through an alias edge and carries no address value
    targets = [n for n in g.nodes if n[0] == "m" and n[1] in vfg.relevant]
    feeds: set = set(targets)
    stack = list(targets)
    while stack:
        x = stack.pop()
        for y in g.predecessors(x):
            if y not in feeds:
                feeds.add(y)
                stack.append(y)
    for comp in wccs:
        relevant = any(n[0] == "m" and n[1] in vfg.relevant for n in comp)
        if not relevant:
            continue
        sub = vg.subgraph(n for n in comp if n[0] != "m")
        cond = nx.condensation(sub)
        for c in cond.nodes:
            if cond.in_degree(c) != 0:
                continue
            members = sorted(cond.nodes[c]["members"], key=_node_order)
            if not any(m in feeds for m in members):
                continue
            root = members[0]
            out |= _root_points(f, root, g, mods)
    return out


def _node_order(n):
    kind = {"e": 0, "d": 1, "u": 2}[n[0]]
    return (n[1] if n[0] != "e" else -1, kind, n[-1])


def _root_points(f: Function, root, g: nx.DiGraph, mods) -> set[RegPoint]:
    if root[0] == "e":
        r = root[1]
        return {use_point(f, u[1], r, mods) for u in g.successors(root) if u[0] == "u"}
    if root[0] == "d":
        i, r = root[1], root[2]
        ins = f.instrs[i]
        if ins.op in ("load", "pop") or ins.op == "call":
            return {RegPoint(f.name, i, r, before=False)}
        return set()  # constant definition
    if root[0] == "u":
        return {use_point(f, root[1], root[2], mods)}
    return set()


# ---------------------------------------------------------------------------
# taint-unchanged blocks

MAX_UNCHANGED_CELLS = 16


def _pattern(j: int, k: int) -> int:
    """Bitset over the 2^k assignments: bit a set iff assignment a taints cell j."""
    width = 1 << k
    half = 1 << j
    unit = ((1 << half) - 1) << half
    period = half * 2
    reps = ((1 << width) - 1) // ((1 << period) - 1)
    return unit * reps


def block_taint_effects(f: Function, b, slots, may: MayTaint):
    """Symbolic effect of a block: (cells, outputs) or None if the block is opaque.

    Cells are registers ("r", n) and memory occurrences ("m", i). Each output maps a
    written cell to the frozenset of input cells OR'd into it (empty = sanitized)."""
    state: dict = {}
    cells: list = []

    def cell(c):
        if c[0] == "r" and c[1] not in may.regs:
            return frozenset()
        if c[0] == "m" and not may.mem:
            return frozenset()
        if c not in state:
            cells.append(c)
            state[c] = frozenset({c})
        return state[c]

    def write(c, v):
        if c[0] == "r" and c[1] not in may.regs:
            return
        if c[0] == "m" and not may.mem:
            return
        if c not in state:
            cells.append(c)
        state[c] = v

    for i in range(b.start, b.end):
        ins = f.instrs[i]
        ss = slots.get(ins.origin) if ins.origin is not None else None
        if ss is not None and ss.sources:
            return None
        op, ops = ins.op, ins.operands
        if op == "mov":
            write(("r", ops[0].reg), cell(("r", ops[1].reg)) if ops[1].kind == "reg" else frozenset())
        elif op in BINARY_OPS:
            d = ops[0].reg
            if op == "xor" and ops[1].kind == "reg" and ops[1].reg == d:
                write(("r", d), frozenset())
            elif ops[1].kind == "reg":
                write(("r", d), cell(("r", d)) | cell(("r", ops[1].reg)))
            else:
                cell(("r", d))
        elif op in ("load", "pop"):
            write(("r", ops[0].reg), cell(("m", i)))
        elif op == "store":
            write(("m", i), cell(("r", ops[1].reg)) if ops[1].kind == "reg" else frozenset())
        elif op == "push":
            write(("m", i), cell(("r", ops[0].reg)) if ops[0].kind == "reg" else frozenset())
        elif op == "call":
            if ins.target not in INTRINSICS or may.mem:
                return None
        elif op == "taint_source":
            return None
    return cells, state


def is_taint_unchanged(f: Function, b, slots, may: MayTaint, implicit: bool = False) -> bool:
    if implicit and may.any:
        return False
    eff = block_taint_effects(f, b, slots, may)
    if eff is None:
        return False
    cells, state = eff
    k = len(cells)
    if k > MAX_UNCHANGED_CELLS:
        return False
    if k == 0:
        return True
    pats = {c: _pattern(j, k) for j, c in enumerate(cells)}
    for c, deps in state.items():
        v = 0
        for d in deps:
            v |= pats[d]
        if v != pats[c]:
            return False
    return True


def compute_taint_unchanged_blocks(f: Function, config: TaintConfig, p: Program) -> set[int]:
    facts = program_facts(p, config)
    return {b.index for b in f.cfg
            if is_taint_unchanged(f, b, facts.slots, facts.may, config.implicit)}


def silent_blocks(f: Function, facts: ProgramFacts) -> set[int]:
    """Blocks the replay can skip: taint-unchanged, no record, call, exit, source or sink."""
    out = set()
    implicit = facts.config.implicit
    for b in f.cfg:
        last = f.instrs[b.end - 1]
        if last.op in ("ret", "halt"):
            continue
        bad = False
        for i in range(b.start, b.end):
            ins = f.instrs[i]
            if ins.op in ("record", "call", "taint_source", "taint_sink"):
                bad = True
                break
            if ins.origin is not None and ins.origin in facts.slots:
                bad = True
                break
        if bad:
            continue
        if is_taint_unchanged(f, b, facts.slots, facts.may, implicit):
            out.add(b.index)
    return out


# ---------------------------------------------------------------------------
# block selection


def reduced_cfg(f: Function, removed: set[int]) -> tuple[list[int], dict[int, set[int]]]:
    """Drop removed blocks and relink their edges; the entry block always stays."""
    keep = [b.index for b in f.cfg if b.index not in removed or b.index == 0]
    ks = set(keep)
    succ: dict[int, set[int]] = {}
    for u in keep:
        out: set[int] = set()
        seen: set[int] = set()
        stack = list(f.cfg[u].succs)
        while stack:
            v = stack.pop()
            if v in ks:
                out.add(v)
            elif v not in seen:
                seen.add(v)
                stack.extend(f.cfg[v].succs)
        succ[u] = out
    return keep, succ


def select_target_blocks(nodes: list, succ: dict, entry, label=None) -> set:
    """Weighted dominator selection: one max-weight node per SCC of the dominance graph.

    The component holding the entry is skipped unless it is the only one: reaching
    the entry is implied by the start of the trace itself."""
    if not nodes:
        return set()
    label = label or (lambda n: n)
    idx = {n: k for k, n in enumerate(nodes)}
    sl = [[idx[v] for v in succ.get(n, ()) if v in idx] for n in nodes]
    dom = graphs.dominator_sets(len(nodes), sl, idx[entry])
    pdom = graphs.postdominator_sets(len(nodes), sl)
    g = nx.DiGraph()
    g.add_nodes_from(dom)
    for v, ds in dom.items():
        for d in ds:
            if d != v:
                g.add_edge(d, v)
    for v, ps in pdom.items():
        for d in ps:
            if d != v and d in dom and v in dom:
                g.add_edge(d, v)
    comps = list(nx.strongly_connected_components(g))
    e = idx[entry]
    if len(comps) > 1:
        comps = [c for c in comps if e not in c]
    out = set()
    for c in comps:
        best = max(c, key=lambda k: (len(dom[k]), _neg_label(label(nodes[k]))))
        out.add(nodes[best])
    return out


class _neg_label:
    """Orders labels so that max() picks the lowest one."""
    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def __lt__(self, other):
        return self.v > other.v

    def __eq__(self, other):
        return self.v == other.v


def label_key(f: Function, bi: int):
    return f.cfg[bi].start


def eliminate_functions(p: Program, config: TaintConfig) -> set[str]:
    facts = program_facts(p, config)
    out = set()
    for name, f in p.functions.items():
        if name == p.entry:
            continue
        if any(ins.op == "call" and ins.target not in INTRINSICS for ins in f.instrs):
            continue
        if any(ins.op in ("taint_source", "taint_sink", "record") or
               (ins.origin is not None and ins.origin in facts.slots) for ins in f.instrs):
            continue
        if all(is_taint_unchanged(f, b, facts.slots, facts.may, config.implicit) for b in f.cfg):
            out.add(name)
    return out


# ---------------------------------------------------------------------------
# loops


@dataclass
class LoopInfo:
    func: str
    header: int
    body: frozenset[int]
    back_edges: tuple[tuple[int, int], ...]
    ivs: dict[int, int] = field(default_factory=dict)  # register -> index of its update
    irreducible: bool = False

    @property
    def latches(self) -> set[int]:
        return {u for u, _ in self.back_edges}


def _loop_defs(f: Function, body, mods) -> dict[int, list[int]]:
    defs: dict[int, list[int]] = {}
    for bi in body:
        b = f.cfg[bi]
        for i in range(b.start, b.end):
            for r in _vfg_defs_regs(f.instrs[i], mods):
                defs.setdefault(r, []).append(i)
    return defs


def _vfg_defs_regs(ins: Instruction, mods) -> list[int]:
    return [d for d, _ in _vfg_defs(ins, mods)]


def find_loops(f: Function, p: Program) -> list[LoopInfo]:
    cfg = f.cfg
    succs = [b.succs for b in cfg]
    dom = graphs.dominator_sets(len(cfg), succs, 0)
    preds = f.preds
    by_header: dict[int, set[tuple[int, int]]] = {}
    for u in dom:
        for v in succs[u]:
            if v in dom.get(u, ()):
                by_header.setdefault(v, set()).add((u, v))
    mods = mod_sets(p)
    loops = []
    covered: set[int] = set()
    for h, bes in sorted(by_header.items()):
        body = {h}
        stack = [u for u, _ in bes if u != h]
        while stack:
            x = stack.pop()
            if x in body:
                continue
            body.add(x)
            stack.extend(q for q in preds[x] if q in dom)
        lp = LoopInfo(f.name, h, frozenset(body), tuple(sorted(bes)))
        lp.ivs = _find_ivs(f, lp, dom, mods)
        loops.append(lp)
        covered |= body
    # cycles with more than one entry have no natural-loop header
    g = nx.DiGraph()
    g.add_nodes_from(dom)
    g.add_edges_from((u, v) for u in dom for v in succs[u])
    for comp in nx.strongly_connected_components(g):
        if len(comp) < 2 and not any(u in succs[u] for u in comp):
            continue
        entries = {v for v in comp if any(q not in comp for q in preds[v]) or v == 0}
        if len(entries) > 1 or not any(all(x in dom[y] for y in comp) for x in comp):
            h = min(entries) if entries else min(comp)
            retreat = tuple(sorted((u, v) for u in comp for v in succs[u] if v in entries))
            loops.append(LoopInfo(f.name, h, frozenset(comp), retreat, {}, True))
    return loops


def _find_ivs(f: Function, lp: LoopInfo, dom, mods) -> dict[int, int]:
    defs = _loop_defs(f, lp.body, mods)
    out = {}
    for r, idxs in defs.items():
        if len(idxs) != 1 or r == SP:
            continue
        i = idxs[0]
        ins = f.instrs[i]
        if ins.op not in ("add", "sub") or ins.operands[0].reg != r:
            continue
        s = ins.operands[1]
        if s.kind == "reg" and s.reg in defs:
            continue  # stride must be loop-invariant
        bi = f.block_of[i]
        if all(bi in dom[u] for u in lp.latches):
            out[r] = i
    return out


def _iv_reach(vfg: ValueFlowGraph, lp: LoopInfo) -> set:
    f = vfg.func
    seeds = [n for n in vfg.graph.nodes
             if n[0] in ("u", "d") and n[2] in lp.ivs and f.block_of[n[1]] in lp.body]
    seen = set(seeds)
    stack = list(seeds)
    g = vfg.graph
    while stack:
        x = stack.pop()
        for y in g.successors(x):
            if y not in seen:
                seen.add(y)
                stack.append(y)
    return seen


def loop_flags(lp: LoopInfo, vfg: ValueFlowGraph) -> tuple[bool, bool]:
    """(f_d, f_c) for a reducible loop."""
    f = vfg.func
    cfg = f.cfg
    rel = [i for i in vfg.relevant if f.block_of[i] in lp.body]
    reach = _iv_reach(vfg, lp)
    f_d = any(("m", i) in reach for i in rel)
    cd = graphs.control_dependence(len(cfg), [b.succs for b in cfg])
    f_c = False
    for i in rel:
        for x in cd.get(f.block_of[i], ()):
            if x not in lp.body:
                continue
            bx = cfg[x]
            if any(s not in lp.body for s in bx.succs):
                continue  # the loop branch itself
            if _branch_reads_iv(f, bx, reach):
                f_c = True
                break
        if f_c:
            break
    return f_d, f_c


def _branch_reads_iv(f: Function, bx, reach) -> bool:
    for i in range(bx.end - 1, bx.start - 1, -1):
        ins = f.instrs[i]
        if ins.op == "cmp":
            return any(("u", i, r) in reach for r in ins.reg_uses())
    return True  # flags set elsewhere: assume dependent


LOOP_TYPES = {(True, True): "non-once", (True, False): "bl-once",
              (False, True): "reg-once", (False, False): "full-once"}


def classify_loop(lp: LoopInfo, vfg: ValueFlowGraph) -> str:
    if lp.irreducible:
        return "non-once"
    return LOOP_TYPES[loop_flags(lp, vfg)]


# ---------------------------------------------------------------------------
# replay model


def _bits(regs) -> int:
    m = 0
    for r in regs:
        m |= 1 << r
    return m


@dataclass
class FunctionModel:
    func: Function
    silent: set[int]
    pre_records: dict[int, list[int]]  # host index -> records consumed together with the host
    early: set[int]  # record indices consumed early
    announce: dict[int, int | None]  # block -> index of the first record before any user call
    landings: dict[int, tuple[dict[int, int], int]] = field(default_factory=dict)

    def landing_info(self, bi: int) -> tuple[dict[int, int], int]:
        """For an undecided branch ending block bi: ({announce site: landing block}, clobber mask).

        Landing blocks whose announcement is missing map from -1-block."""
        hit = self.landings.get(bi)
        if hit is not None:
            return hit
        f = self.func
        cfg = f.cfg
        clobber = FLAGS_BIT
        found: dict[int, int] = {}
        seen: set[int] = set()
        stack = list(cfg[bi].succs)
        while stack:
            s = stack.pop()
            if s in seen:
                continue
            seen.add(s)
            if s in self.silent:
                b = cfg[s]
                for i in range(b.start, b.end):
                    clobber |= _bits(f.instrs[i].reg_defs())
                stack.extend(cfg[s].succs)
                continue
            a = self.announce.get(s)
            key = f.instrs[a].site if a is not None else -1 - s
            found[key] = s
        self.landings[bi] = (found, clobber)
        return found, clobber


class ReplayModel:
    """Static facts about a rewritten program needed to replay it from selective traces."""

    def __init__(self, rw: Program, config: TaintConfig, naive: bool = False):
        self.program = rw
        self.config = config
        self.naive = naive
        self.facts = program_facts(rw, config)
        self.skipped = set() if naive else eliminate_functions(rw, config)
        self.mods = mod_sets(rw)
        self.funcs: dict[str, FunctionModel] = {}
        self.site_at: dict[int, tuple[str, int]] = {}
        for name, f in rw.functions.items():
            pre: dict[int, list[int]] = {}
            early: set[int] = set()
            n = len(f.instrs)
            bo = f.block_of
            for i, ins in enumerate(f.instrs):
                if ins.op == "record":
                    self.site_at[ins.site] = (name, i)
                    continue
                if ins.is_terminator or (ins.op == "call" and ins.target not in INTRINSICS):
                    continue
                defs = ins.reg_defs()
                j = i + 1
                while j < n and bo[j] == bo[i]:
                    r = f.instrs[j]
                    if r.op != "record" or not r.operands or r.operands[0].reg in defs:
                        break
                    pre.setdefault(i, []).append(j)
                    early.add(j)
                    j += 1
            announce: dict[int, int | None] = {}
            for b in f.cfg:
                announce[b.index] = None
                for i in range(b.start, b.end):
                    ins = f.instrs[i]
                    if ins.op == "record":
                        announce[b.index] = i
                        break
                    if ins.op == "call" and ins.target not in INTRINSICS:
                        break
            silent = silent_blocks(f, self.facts) if name not in self.skipped and not naive else set()
            self.funcs[name] = FunctionModel(f, silent, pre, early, announce)

    # -- static knownness -------------------------------------------------

    def _transfer(self, f: Function, fm: FunctionModel, i: int, m: int, exits) -> int:
        ins = f.instrs[i]
        for j in fm.pre_records.get(i, ()):
            m |= 1 << f.instrs[j].operands[0].reg
        op, ops = ins.op, ins.operands
        if op == "record":
            if ops:
                m |= 1 << ops[0].reg
        elif op == "mov":
            d = ops[0].reg
            if ops[1].kind == "imm" or (m >> ops[1].reg) & 1:
                m |= 1 << d
            else:
                m &= ~(1 << d)
        elif op in BINARY_OPS:
            d = ops[0].reg
            if op == "xor" and ops[1].kind == "reg" and ops[1].reg == d:
                m |= 1 << d
            elif ops[1].kind == "reg" and not (m >> ops[1].reg) & 1:
                m &= ~(1 << d)
        elif op in ("load", "pop"):
            m &= ~(1 << ops[0].reg)
        elif op == "cmp":
            ok = (m >> ops[0].reg) & 1 and (ops[1].kind == "imm" or (m >> ops[1].reg) & 1)
            m = m | FLAGS_BIT if ok else m & ~FLAGS_BIT
        elif op == "call" and ins.target not in INTRINSICS:
            mb = _bits(self.mods[ins.target]) | FLAGS_BIT
            if ins.target in self.skipped:
                m &= ~mb
            else:
                m = (m & ~mb) | (exits.get(ins.target, 0) & mb)
        return m

    def knownness(self) -> dict[str, list[int | None]]:
        """Must-known register/flags mask before each instruction (None = unreachable)."""
        rw = self.program
        called: dict[str, list] = {}
        for name, f in rw.functions.items():
            if name in self.skipped:
                continue
            for i, ins in enumerate(f.instrs):
                if ins.op == "call" and ins.target not in INTRINSICS and ins.target not in self.skipped:
                    called.setdefault(ins.target, []).append((name, i))
        entry = {name: (ALL_KNOWN if name in called and name != rw.entry else 0) for name in rw.functions}
        exits = {name: ALL_KNOWN for name in rw.functions}
        result: dict[str, list[int | None]] = {}
        for _ in range(100):
            result = {name: self._function_knownness(name, entry[name], exits)
                      for name in rw.functions if name not in self.skipped}
            new_entry = dict(entry)
            for g, sites in called.items():
                if g == rw.entry:
                    continue
                m = ALL_KNOWN
                for name, i in sites:
                    v = result.get(name, [None])[i] if name in result else None
                    if v is not None:
                        m &= v
                new_entry[g] = m
            new_exits = dict(exits)
            for name, before in result.items():
                f = rw[name]
                m = ALL_KNOWN
                for i, ins in enumerate(f.instrs):
                    if ins.op == "ret" and before[i] is not None:
                        m &= before[i]
                new_exits[name] = m
            if new_entry == entry and new_exits == exits:
                break
            entry, exits = new_entry, new_exits
        return result

    def _function_knownness(self, name: str, entry_mask: int, exits) -> list[int | None]:
        f = self.program[name]
        fm = self.funcs[name]
        cfg = f.cfg
        before: list[int | None] = [None] * len(f.instrs)
        block_in: list[int | None] = [None] * len(cfg)
        block_in[0] = entry_mask
        work = [0]
        while work:
            bi = work.pop()
            m = block_in[bi]
            b = cfg[bi]
            for i in range(b.start, b.end):
                before[i] = m
                m = self._transfer(f, fm, i, m, exits)
            last = f.instrs[b.end - 1]
            if last.op == "jcc" and not m & FLAGS_BIT:
                found, clobber = fm.landing_info(bi)
                outs = [(s, m & ~clobber) for s in found.values()]
            else:
                outs = [(s, m) for s in b.succs]
            for s, v in outs:
                cur = block_in[s]
                nv = v if cur is None else cur & v
                if cur is None or nv != cur:
                    block_in[s] = nv
                    work.append(s)
        return before

    # -- plan requirements ------------------------------------------------

    def needed_registers(self, f: Function, i: int) -> tuple[int, ...]:
        """Registers whose values the replay must know before instruction i."""
        if i not in self.facts.relevant[f.name]:
            return ()
        ins = f.instrs[i]
        ss = self.facts.slots.get(ins.origin) if ins.origin is not None else None
        regs = list(address_regs(ins, self.config))
        if ins.op == "call" and ins.target in INTRINSICS:
            regs = list(self.config.summary_for(ins.target).args)
        if ss is not None:
            for kind, v in ss.sources + ss.sinks:
                if kind == "mem" and v.reg not in regs:
                    regs.append(v.reg)
        return tuple(regs)

    def requirements(self) -> tuple[set[RegPoint], set[tuple[str, int]]]:
        """Trace points missing for a sound replay, in original-program coordinates."""
        known = self.knownness()
        pts: set[RegPoint] = set()
        blocks: set[tuple[str, int]] = set()
        for name, before in known.items():
            f = self.program[name]
            fm = self.funcs[name]
            for b in f.cfg:
                if before[b.start] is None:
                    continue
                if b.index not in fm.silent:
                    for i in range(b.start, b.end):
                        need = self.needed_registers(f, i)
                        if not need:
                            continue
                        m = before[i]
                        for j in fm.pre_records.get(i, ()):
                            m |= 1 << f.instrs[j].operands[0].reg
                        ins = f.instrs[i]
                        for r in need:
                            if not (m >> r) & 1:
                                fn, oi = ins.origin
                                pts.add(RegPoint(fn, oi, r, before=_host_defines(ins, r, self.mods)))
                last = f.instrs[b.end - 1]
                if last.op == "jcc":
                    if not before[b.end - 1] & FLAGS_BIT:
                        found, _ = fm.landing_info(b.index)
                        for key, s in found.items():
                            if key < 0:
                                lead = f.instrs[f.cfg[s].start]
                                if lead.origin is not None:
                                    blocks.add(lead.origin)
        return pts, blocks


# ---------------------------------------------------------------------------
# plan


PLAN_MAGIC = "HTPLAN 1"


@dataclass
class LoopDirective:
    func: str
    header: int  # index of the header's first instruction in the original program
    kind: str
    hoisted: tuple[int, ...] = ()


@dataclass
class TracePlan:
    registers: set[RegPoint] = field(default_factory=set)
    blocks: set[tuple[str, int]] = field(default_factory=set)  # (function, leader index)
    skipped_functions: set[str] = field(default_factory=set)
    loop_directives: dict[tuple[str, int], LoopDirective] = field(default_factory=dict)
    naive: bool = False  # replay consumes branch bits instead of landing announcements

    def static_count(self) -> int:
        return len(self.registers) + len(self.blocks) + sum(len(d.hoisted) for d in self.loop_directives.values())

    def describe(self, p: Program) -> dict[str, list[str]]:
        regs = sorted(f"{REG_NAMES[pt.reg]}@{p[pt.func].site_name(pt.index)}" + (" (before)" if pt.before else "")
                      for pt in self.registers)
        blocks = sorted(p[fn].site_name(i) for fn, i in self.blocks)
        loops = sorted(f"{p[d.func].site_name(d.header)}: {d.kind}"
                       + (f" hoist {','.join(REG_NAMES[r] for r in d.hoisted)}" if d.hoisted else "")
                       for d in self.loop_directives.values())
        return {"registers": regs, "blocks": blocks, "skipped": sorted(self.skipped_functions), "loops": loops}

    def dumps(self) -> str:
        import json
        body = {
            "registers": sorted([pt.func, pt.index, pt.reg, pt.before] for pt in self.registers),
            "blocks": sorted([fn, i] for fn, i in self.blocks),
            "skipped": sorted(self.skipped_functions),
            "loops": sorted([d.func, d.header, d.kind, list(d.hoisted)] for d in self.loop_directives.values()),
            "naive": self.naive,
        }
        return PLAN_MAGIC + "\n" + json.dumps(body) + "\n"

    @staticmethod
    def loads(text: str) -> "TracePlan":
        import json
        head, _, body = text.partition("\n")
        if head.strip() != PLAN_MAGIC:
            raise ValueError("not a trace plan file")
        d = json.loads(body)
        return TracePlan(
            {RegPoint(a, b, c, bool(e)) for a, b, c, e in d["registers"]},
            {(a, b) for a, b in d["blocks"]},
            set(d["skipped"]),
            {(a, b): LoopDirective(a, b, k, tuple(h)) for a, b, k, h in d["loops"]},
            bool(d.get("naive", False)),
        )


def _has_sinks(facts: ProgramFacts) -> bool:
    return any(ss.sinks for ss in facts.slots.values())


def _all_branch_targets(f: Function) -> set[tuple[str, int]]:
    out = set()
    for b in f.cfg:
        if f.instrs[b.end - 1].op == "jcc":
            for s in b.succs:
                out.add((f.name, f.cfg[s].start))
    return out


def _access_points(f: Function, facts: ProgramFacts, mods) -> set[RegPoint]:
    """The base register of every relevant memory access, recorded at the access."""
    out = set()
    config = facts.config
    for i in sorted(facts.relevant[f.name]):
        ins = f.instrs[i]
        regs = list(address_regs(ins, config))
        if ins.op == "call" and ins.target in INTRINSICS:
            regs = list(config.summary_for(ins.target).args)
        ss = facts.slots.get(ins.origin) if ins.origin is not None else None
        if ss is not None:
            regs += [v.reg for kind, v in ss.sources + ss.sinks if kind == "mem"]
        for r in dict.fromkeys(regs):
            out.add(RegPoint(f.name, i, r, before=_host_defines(ins, r, mods)))
    return out


def conservative_points(p: Program, config: TaintConfig) -> TracePlan:
    """Baseline plan: every relevant access base plus every branch target, no pruning."""
    facts = program_facts(p, config)
    mods = mod_sets(p)
    plan = TracePlan(naive=True)
    if not _has_sinks(facts):
        return plan
    for f in p.functions.values():
        plan.registers |= _access_points(f, facts, mods)
        if facts.may.any:
            plan.blocks |= _all_branch_targets(f)
    return plan


def _loop_defined(f: Function, lp: LoopInfo, mods) -> set[int]:
    return set(_loop_defs(f, lp.body, mods))


def plan_trace_points(p: Program, config: TaintConfig, *, reg_opt: bool = True, bl_opt: bool = True,
                      loop_opt: bool = True, max_rounds: int = 200) -> TracePlan:
    from .rewriter import rewrite

    facts = program_facts(p, config)
    plan = TracePlan()
    if not _has_sinks(facts):
        return plan
    mods = mod_sets(p)
    plan.skipped_functions = eliminate_functions(p, config)
    for name, f in p.functions.items():
        if name in plan.skipped_functions:
            continue
        vfg = build_vfg(f, p, facts)
        direct = _access_points(f, facts, mods)
        if reg_opt:
            # roots of many-rooted components can outnumber the accesses they feed
            roots = identify_registers(vfg, p)
            plan.registers |= roots if len(roots) <= len(direct) else direct
        else:
            plan.registers |= direct
        if bl_opt:
            if any(ins.op == "jcc" for ins in f.instrs):  # otherwise the block order is static
                silent = silent_blocks(f, facts)
                nodes, succ = reduced_cfg(f, silent)
                sel = select_target_blocks(nodes, succ, 0, label=lambda b, _f=f: _f.cfg[b].start)
                plan.blocks |= {(name, f.cfg[b].start) for b in sel}
        else:
            plan.blocks |= _all_branch_targets(f)
        if not loop_opt:
            continue
        loops = sorted(find_loops(f, p), key=lambda lp: len(lp.body))
        for lp in loops:
            kind = classify_loop(lp, vfg)
            hoisted: list[int] = []
            if not lp.irreducible:
                defined = _loop_defined(f, lp, mods)
                if kind in ("reg-once", "full-once"):
                    for pt in sorted(plan.registers, key=lambda x: (x.func, x.index, x.reg, x.before)):
                        if pt.func == name and f.block_of[pt.index] in lp.body and pt.reg not in defined:
                            plan.registers.discard(pt)
                            if pt.reg not in hoisted:
                                hoisted.append(pt.reg)
                if kind in ("bl-once", "full-once"):
                    for bi in sorted(lp.body):
                        b = f.cfg[bi]
                        if f.instrs[b.end - 1].op != "jcc" or all(s in lp.body for s in b.succs):
                            continue
                        for i in range(b.end - 1, b.start - 1, -1):
                            if f.instrs[i].op == "cmp":
                                for r in f.instrs[i].reg_uses():
                                    if (r not in defined or r in lp.ivs) and r not in hoisted:
                                        hoisted.append(r)
                                break
                    for bi in lp.body:
                        plan.blocks.discard((name, f.cfg[bi].start))
            key = (name, f.cfg[lp.header].start)
            plan.loop_directives[key] = LoopDirective(name, key[1], kind, tuple(sorted(hoisted)))
    for _ in range(max_rounds):
        rw, _tmap = rewrite(p, plan)
        need_pts, need_blocks = ReplayModel(rw, config).requirements()
        if not need_pts and not need_blocks:
            return plan
        new_pts = need_pts - plan.registers
        new_blocks = need_blocks - plan.blocks
        if not new_pts and not new_blocks:
            raise RuntimeError(f"trace plan cannot satisfy {sorted(need_pts, key=str)} {sorted(need_blocks)}")
        plan.registers |= new_pts
        plan.blocks |= new_blocks
    raise RuntimeError("trace plan did not converge")
