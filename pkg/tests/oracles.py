"""Brute-force reference computations shared by the tests. Deliberately
naive and independent of the package's own scheduling code."""
from __future__ import annotations

import random

from hybridemu.graph import (CommDescriptor, CommEvent, CommGroup, CommKind, ComputeSpan,
                             ExecutionGraph, GraphBuilder, ReduceOp)


def relaxation_schedule(g: ExecutionGraph, durations: dict[int, int] | None = None) -> dict[int, int]:
    """Start times by repeated relaxation until nothing moves: a node starts
    at the latest end of its directional predecessors, sync members at the
    latest such time over the group."""
    dur = durations if durations is not None else {n: g.nodes[n].duration_ns for n in g.nodes}
    start = {n: 0 for n in g.nodes}
    changed = True
    rounds = 0
    while changed:
        changed = False
        rounds += 1
        assert rounds <= len(g.nodes) + 2, "no fixed point (cycle?)"
        for s, d in g.directional:
            if start[s] + dur[s] > start[d]:
                start[d] = start[s] + dur[s]
                changed = True
        for ms in g.sync_groups.values():
            t = max(start[m] for m in ms)
            for m in ms:
                if start[m] != t:
                    start[m] = t
                    changed = True
    return start


def makespan(starts: dict[int, int], dur: dict[int, int]) -> int:
    if not starts:
        return 0
    return max(starts[n] + dur[n] for n in starts) - min(starts.values())


def longest_path_enumeration(g: ExecutionGraph) -> int:
    """Longest chain length by enumerating every path (small graphs only).
    Sync members inherit the predecessors of their whole group."""
    sync_of = g.sync_of()
    dpred: dict[int, list[int]] = {n: [] for n in g.nodes}
    for s, d in g.directional:
        dpred[d].append(s)
    preds = {}
    for n in g.nodes:
        ms = g.sync_groups[sync_of[n]] if n in sync_of else [n]
        preds[n] = sorted({p for m in ms for p in dpred[m]})

    best = 0

    def walk(n: int, acc: int) -> None:
        nonlocal best
        acc += g.nodes[n].duration_ns
        if not preds[n]:
            best = max(best, acc)
        for p in preds[n]:
            walk(p, acc)

    for n in g.nodes:
        walk(n, 0)
    return best


def random_graph(seed: int, ranks: int = 3, steps: int = 6, timed: bool = True) -> ExecutionGraph:
    """Small random but well-formed graph: per-rank chains of compute and
    collectives on a single all-ranks group, with every rank issuing the
    same number of collectives so occurrences pair up."""
    rng = random.Random(seed)
    groups = {0: CommGroup(0, "W", tuple(range(ranks)))}
    b = GraphBuilder(ranks, groups)
    n_coll = rng.randint(0, 3)
    for r in range(ranks):
        plan = ["C"] * rng.randint(1, steps) + ["M"] * n_coll
        head, rest = plan[0], plan[1:]
        rng.shuffle(rest)
        seq = 0
        for kind in [head] + rest:
            if kind == "C":
                b.add(r, ComputeSpan(rng.choice(["fwd", "bwd", "optim"]), rng.choice([None, 0, 1])))
            else:
                b.add(r, CommEvent(CommDescriptor(CommKind.ALL_REDUCE, 0, 64, ReduceOp.SUM), "ar"),
                      occurrence=(0, seq))
                seq += 1
    g = b.build()
    if timed:
        for n in g.nodes.values():
            n.duration_ns = rng.randint(0, 50)
    return g


def naive_reduce(contributions, op: str) -> list:
    """Element-by-element reduction in plain Python, rank order ascending."""
    ranks = sorted(contributions)
    n = len(contributions[ranks[0]])
    out = []
    for i in range(n):
        acc = contributions[ranks[0]][i]
        for r in ranks[1:]:
            x = contributions[r][i]
            if op == "Sum":
                acc = acc + x
            elif op == "Max":
                acc = x if x > acc else acc
            else:
                acc = x if x < acc else acc
        out.append(acc)
    return out
