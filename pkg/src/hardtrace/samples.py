"""Canonical example programs: the two-path toy and the four loop shapes."""
from __future__ import annotations

from .isa import Program, parse_program
from .taintgraph import TaintConfig, parse_taint_config
from .tracer import MachineInput

# The toy program: a value is copied at L1, one of two paths runs, and the
# address at L8 is derived from it.  r5 and r4 are dead, so the loads at L4/L6
# cannot influence any taint verdict.
TOY_TEXT = """\
# tir 1
func main
L1: mov r1, r0
    cmp r2, r3
L2: jne L6
L3: load r2, [r0]
L4: load r5, [r6]
L5: store [r1], r2
    jmp L8
L6: pop r4
L7: sub r1, 4
L8: load r0, [r1]
    halt
"""

TOY_TAINT = """\
# tir-taint 1
source main@L1 r0
sink main@L8 r0
taint 0x7c
"""


def toy() -> tuple[Program, TaintConfig, MachineInput]:
    p = parse_program(TOY_TEXT)
    cfg = parse_taint_config(TOY_TAINT, p)
    regs = (0x80, 0, 1, 2, 0, 0, 0x200, 0x8000)
    inp = MachineInput(regs, {0x7c: 0x1234, 0x80: 7})
    return p, cfg, inp
