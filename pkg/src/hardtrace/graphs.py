"""Dominance, post-dominance and control dependence over block-index graphs."""
from __future__ import annotations

import networkx as nx

EXIT = -1


def _digraph(n: int, succs: list[tuple[int, ...]] | list[list[int]]) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    for u in range(n):
        for v in succs[u]:
            g.add_edge(u, v)
    return g


def reachable(n: int, succs, entry: int = 0) -> set[int]:
    seen = {entry}
    stack = [entry]
    while stack:
        u = stack.pop()
        for v in succs[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def dominator_sets(n: int, succs, entry: int = 0) -> dict[int, set[int]]:
    """Dom(v) for every node reachable from entry (v included)."""
    g = _digraph(n, succs)
    idom = nx.immediate_dominators(g, entry)
    out: dict[int, set[int]] = {}
    for v in idom:
        s = {v}
        u = v
        while idom[u] != u:
            u = idom[u]
            s.add(u)
        out[v] = s
    return out


def postdominator_sets(n: int, succs, entry: int = 0) -> dict[int, set[int]]:
    """PDom(v) over nodes that can reach an exit; exits are nodes without successors."""
    g = nx.DiGraph()
    g.add_node(EXIT)
    g.add_nodes_from(range(n))
    for u in range(n):
        if not succs[u]:
            g.add_edge(EXIT, u)
        for v in succs[u]:
            g.add_edge(v, u)
    ipdom = nx.immediate_dominators(g, EXIT)
    out: dict[int, set[int]] = {}
    for v in ipdom:
        if v == EXIT:
            continue
        s = {v}
        u = v
        while ipdom[u] != EXIT and ipdom[u] != u:
            u = ipdom[u]
            s.add(u)
        out[v] = s
    return out


def immediate_postdominators(n: int, succs) -> dict[int, int]:
    g = nx.DiGraph()
    g.add_node(EXIT)
    g.add_nodes_from(range(n))
    for u in range(n):
        if not succs[u]:
            g.add_edge(EXIT, u)
        for v in succs[u]:
            g.add_edge(v, u)
    ipdom = nx.immediate_dominators(g, EXIT)
    return {v: d for v, d in ipdom.items() if v != EXIT}


def control_dependence(n: int, succs) -> dict[int, set[int]]:
    """Map block -> set of branch blocks it is control dependent on.

    Computed with the post-dominance frontier: Y is control dependent on X when
    X is in PDF(Y).
    """
    ipdom = immediate_postdominators(n, succs)
    deps: dict[int, set[int]] = {v: set() for v in range(n)}
    for x in range(n):
        if len(set(succs[x])) < 2:
            continue
        for s in set(succs[x]):
            runner = s
            stop = ipdom.get(x, EXIT)
            while runner != stop and runner != EXIT and runner in ipdom:
                deps[runner].add(x)
                runner = ipdom[runner]
    return deps


def sccs(nodes, edges) -> list[list]:
    g = nx.DiGraph()
    g.add_nodes_from(nodes)
    g.add_edges_from(edges)
    return [sorted(c) for c in nx.strongly_connected_components(g)]
