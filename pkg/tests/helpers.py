"""Brute-force oracles shared by the module tests."""
from __future__ import annotations

from hardtrace.isa import Function


def instr_succs(f: Function) -> list[list[int]]:
    out = []
    for b in f.cfg:
        for i in range(b.start, b.end):
            if i + 1 < b.end:
                out.append([i + 1])
            else:
                out.append([f.cfg[s].start for s in b.succs])
    return out


def reachable_instrs(f: Function) -> set[int]:
    succ = instr_succs(f)
    seen, stack = {0}, [0]
    while stack:
        x = stack.pop()
        for y in succ[x]:
            if y not in seen:
                seen.add(y)
                stack.append(y)
    return seen


def first_hits(f: Function, start: list[int], stops, kills=lambda i: False) -> set[int]:
    """Instructions reached from `start` where `stops(i)` holds, not walking through them
    nor through instructions where `kills(i)` holds."""
    succ = instr_succs(f)
    hits, seen, stack = set(), set(), list(start)
    while stack:
        x = stack.pop()
        if x in seen:
            continue
        seen.add(x)
        if stops(x):
            hits.add(x)
            continue
        if kills(x):
            continue
        stack.extend(succ[x])
    return hits
