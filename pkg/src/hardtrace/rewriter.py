"""Insert `record` instructions for a trace plan and emit the record-site map."""
from __future__ import annotations

import json
from dataclasses import dataclass

from .analysis import TracePlan, conservative_points, find_loops
from .isa import INTRINSICS, REG_NAMES, Function, Instruction, Operand, Program, TirError
from .taintgraph import TaintConfig

MAP_MAGIC = "HTMAP 1"


@dataclass(frozen=True)
class SiteInfo:
    kind: str  # "reg" or "block"
    func: str
    index: int  # original index: host instruction, block leader or loop header
    reg: int | None = None
    where: str = "after"  # after | before | block | preheader

    def describe(self, p: Program | None = None) -> str:
        name = p[self.func].site_name(self.index) if p is not None else f"{self.func}@{self.index}"
        if self.kind == "block":
            return f"block {name}"
        tail = " (preheader)" if self.where == "preheader" else ""
        return f"{REG_NAMES[self.reg]}@{name}{tail}"


@dataclass
class TracePointMap:
    sites: list[SiteInfo]

    def __len__(self) -> int:
        return len(self.sites)

    def dumps(self) -> str:
        rows = [[s.kind, s.func, s.index, s.reg, s.where] for s in self.sites]
        return MAP_MAGIC + "\n" + json.dumps({"sites": rows}) + "\n"

    @staticmethod
    def loads(text: str) -> "TracePointMap":
        head, _, body = text.partition("\n")
        if head.strip() != MAP_MAGIC:
            raise ValueError("not a trace point map file")
        return TracePointMap([SiteInfo(*row) for row in json.loads(body)["sites"]])


def _rec(reg: int | None) -> Instruction:
    ops = (Operand.r(reg),) if reg is not None else ()
    return Instruction("record", ops)


def _is_user_call(ins: Instruction) -> bool:
    return ins.op == "call" and ins.target not in INTRINSICS


def _fresh_label(taken: set[str], base: str) -> str:
    name = base
    k = 1
    while name in taken:
        name = f"{base}{k}"
        k += 1
    taken.add(name)
    return name


def _rewrite_function(f: Function, p: Program, plan: TracePlan):
    n = len(f.instrs)
    before: dict[int, list[int]] = {}
    after: dict[int, list[int]] = {}
    for pt in plan.registers:
        if pt.func != f.name:
            continue
        (before if pt.before else after).setdefault(pt.index, []).append(pt.reg)
    for i, regs in after.items():
        defs = f.instrs[i].reg_defs()
        regs.sort(key=lambda r: (r in defs, r))
    for regs in before.values():
        regs.sort()
    marks = {i for fn, i in plan.blocks if fn == f.name}

    # groups[i]: list of (Instruction, SiteInfo | None) emitted for original index i
    groups: list[list] = []
    for i, ins in enumerate(f.instrs):
        g = [(_rec(r), SiteInfo("reg", f.name, i, r, "before")) for r in before.get(i, ())]
        g.append((ins, None))
        g += [(_rec(r), SiteInfo("reg", f.name, i, r, "after")) for r in after.get(i, ())]
        groups.append(g)

    taken = set(f.labels)
    labels = dict(f.labels)
    retarget: dict[int, str] = {}  # original index of an outside jump -> new label
    inline_dummy: dict[int, tuple[str, list]] = {}  # header index -> (label, records)
    tail_dummies: list[tuple[str, str, list]] = []
    loops = {f.cfg[lp.header].start: lp for lp in find_loops(f, p) if not lp.irreducible}
    for (fn, h), d in sorted(plan.loop_directives.items()):
        if fn != f.name or not d.hoisted or h not in loops:
            continue
        lp = loops[h]
        hb = lp.header
        recs = [(_rec(r), SiteInfo("reg", f.name, h, r, "preheader")) for r in d.hoisted]
        entering = [q for q in f.preds[hb] if q not in lp.body]
        if len(entering) == 1 and hb != 0:
            pb = f.cfg[entering[0]]
            last = f.instrs[pb.end - 1]
            if pb.succs == (hb,) and last.op != "jcc":
                g = groups[pb.end - 1]
                if last.op == "jmp":
                    g[-1:-1] = recs
                else:
                    g.extend(recs)
                continue
        hnames = f.label_at.get(h)
        if hnames:
            hlabel = hnames[0]
        else:
            hlabel = _fresh_label(taken, f"_h{h}")
            labels[hlabel] = h
        plabel = _fresh_label(taken, f"{hlabel}.pre")
        body_idx = {i for bi in lp.body for i in range(f.cfg[bi].start, f.cfg[bi].end)}
        prev = f.instrs[h - 1] if h > 0 else None
        prev_in_loop_falls = prev is not None and (h - 1) in body_idx and \
            (not prev.is_terminator or prev.op == "jcc")
        for i, ins in enumerate(f.instrs):
            if ins.op in ("jmp", "jcc") and i not in body_idx and f.labels[ins.target] == h:
                retarget[i] = plabel
        if prev_in_loop_falls:
            tail_dummies.append((plabel, hlabel, recs))
        else:
            inline_dummy[h] = (plabel, recs)

    # consolidation: a block already announced by a register record needs no mark
    for lead in sorted(marks):
        bi = f.block_of[lead]
        b = f.cfg[bi]
        announced = False
        for i in range(b.start, b.end):
            for ins, info in groups[i]:
                if ins.op == "record":
                    announced = True
                    break
                if _is_user_call(ins):
                    break
            else:
                continue
            break
        if not announced:
            groups[lead].insert(0, (_rec(None), SiteInfo("block", f.name, lead, None, "block")))

    out: list[tuple[Instruction, SiteInfo | None]] = []
    pos: dict[int, int] = {}
    new_labels: dict[str, int] = {}
    for i in range(n):
        if i in inline_dummy:
            plabel, recs = inline_dummy[i]
            new_labels[plabel] = len(out)
            out.extend(recs)
        pos[i] = len(out)
        for ins, info in groups[i]:
            if info is None:
                ins = Instruction(ins.op, ins.operands, ins.cond,
                                  retarget.get(i, ins.target), ins.site, (f.name, i))
            out.append((ins, info))
    for plabel, hlabel, recs in tail_dummies:
        new_labels[plabel] = len(out)
        out.extend(recs)
        out.append((Instruction("jmp", target=hlabel), None))
    for name, idx in labels.items():
        new_labels[name] = pos[idx]
    return out, new_labels


def check_plan(p: Program, plan: TracePlan) -> None:
    """Raise TirError naming the first plan entry that does not fit ``p``."""
    def where(fn: str, i: int) -> str:
        f = p.functions.get(fn)
        return f.site_name(i) if f is not None and 0 <= i < len(f.instrs) else f"{fn}@{i}"

    def instr_ok(fn: str, i: int) -> bool:
        return fn in p.functions and 0 <= i < len(p[fn].instrs)

    for pt in sorted(plan.registers, key=lambda x: (x.func, x.index, x.reg)):
        if not instr_ok(pt.func, pt.index) or not 0 <= pt.reg < len(REG_NAMES):
            raise TirError(f"trace plan names missing register point {where(pt.func, pt.index)}")
    for fn, i in sorted(plan.blocks):
        if not instr_ok(fn, i) or not any(b.start == i for b in p[fn].cfg):
            raise TirError(f"trace plan names missing block {where(fn, i)}")
    for fn, i in sorted(plan.loop_directives):
        if not instr_ok(fn, i) or not any(lp.header == p[fn].block_of[i] for lp in find_loops(p[fn], p)):
            raise TirError(f"trace plan names missing loop header {where(fn, i)}")
    for fn in sorted(plan.skipped_functions):
        if fn not in p.functions:
            raise TirError(f"trace plan skips unknown function {fn}")


def rewrite(p: Program, plan: TracePlan) -> tuple[Program, TracePointMap]:
    """Instrument ``p``: record sites are numbered densely in program order."""
    if p.is_rewritten:
        raise TirError("program is already instrumented")
    check_plan(p, plan)
    sites: list[SiteInfo] = []
    funcs: dict[str, Function] = {}
    for f in p.functions.values():
        out, labels = _rewrite_function(f, p, plan)
        instrs = []
        for ins, info in out:
            if ins.op == "record":
                ins = Instruction("record", ins.operands, site=len(sites))
                sites.append(info)
            instrs.append(ins)
        funcs[f.name] = Function(f.name, tuple(instrs), labels)
    return Program(funcs, p.entry), TracePointMap(sites)


def conservative_plan(p: Program, config: TaintConfig) -> TracePlan:
    """Baseline that traces every relevant memory base and every branch target."""
    return conservative_points(p, config)

