"""Execution graph: per-rank chains of compute spans and communication
events, tied together by synchronization groups.

A graph moves through three states. A *bare* graph carries structure only,
a *timed* graph adds a duration to every node, and a *calibrated* graph adds
globally consistent start times. All times are integer nanoseconds.

On disk the graph is a versioned line-record file::

    prismtrace v1 world=<N> [key=value ...]
    G <gid> <role> <m1,m2,...>
    N <id> <rank> C <label> <mb|-> [dur=<ns>] [start=<ns>]
    N <id> <rank> M <kind> <group> <bytes> <op|-> <alg> <label> [dur=<ns>] [start=<ns>]
    E <src> <dst> D
    E <src> <dst> S <sync_id>

A sync group with members m1 < m2 < ... < mk is written as the chain of
edges m1->m2, m2->m3, ...; singleton groups are not stored.
"""
from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Iterator

from .errors import EmulationError, ValidationError

FORMAT_VERSION = "v1"
MAGIC = "prismtrace"


class CommKind(str, Enum):
    ALL_REDUCE = "AllReduce"
    REDUCE_SCATTER = "ReduceScatter"
    ALL_GATHER = "AllGather"
    ALL_TO_ALL = "AllToAll"
    BROADCAST = "Broadcast"
    SEND = "Send"
    RECV = "Recv"
    BARRIER = "Barrier"


class ReduceOp(str, Enum):
    SUM = "Sum"
    MAX = "Max"
    MIN = "Min"


class Algorithm(str, Enum):
    RING = "Ring"
    TREE = "Tree"


REDUCING_KINDS = frozenset({CommKind.ALL_REDUCE, CommKind.REDUCE_SCATTER})
P2P_KINDS = frozenset({CommKind.SEND, CommKind.RECV})


# -- errors -----------------------------------------------------------------

class MalformedRecord(EmulationError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class UnknownVersion(EmulationError):
    pass


class DanglingEdge(EmulationError):
    def __init__(self, node_id: int, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"edge references undefined node {node_id}{where}")
        self.node_id = node_id


class CyclicGraph(EmulationError):
    pass


class MissingDuration(EmulationError):
    pass


class RemapConflict(EmulationError):
    pass


class InvalidGraph(ValidationError):
    def __init__(self, violations: list[Violation]):
        head = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"{len(violations)} violation(s): {head}{more}")
        self.violations = violations


# -- domain types -----------------------------------------------------------

@dataclass(frozen=True, slots=True)
class CommDescriptor:
    kind: CommKind
    group: int
    bytes: int
    reduce_op: ReduceOp | None = None
    algorithm: Algorithm = Algorithm.RING

    def __post_init__(self):
        if self.bytes < 0:
            raise ValueError(f"negative payload size {self.bytes}")
        if (self.reduce_op is not None) != (self.kind in REDUCING_KINDS):
            raise ValueError(f"reduce_op must be set iff kind is reducing (got {self.kind.value})")

    def compatible(self, other: CommDescriptor) -> bool:
        """Whether two members of one sync group agree on the operation.

        A Send always meets a Recv, and point-to-point partners may both
        send (bidirectional exchange), so the kinds only have to be p2p.
        """
        if self.kind in P2P_KINDS or other.kind in P2P_KINDS:
            return (self.kind in P2P_KINDS and other.kind in P2P_KINDS
                    and self.group == other.group and self.bytes == other.bytes)
        return self == other


@dataclass(frozen=True, slots=True)
class ComputeSpan:
    label: str
    microbatch: int | None = None


@dataclass(frozen=True, slots=True)
class CommEvent:
    descriptor: CommDescriptor
    label: str = "-"


@dataclass(slots=True)
class GraphNode:
    id: int
    rank: int
    op: ComputeSpan | CommEvent
    duration_ns: int | None = None
    start_ns: int | None = None

    @property
    def is_comm(self) -> bool:
        return isinstance(self.op, CommEvent)

    @property
    def label(self) -> str:
        return self.op.label

    @property
    def end_ns(self) -> int:
        return self.start_ns + self.duration_ns


@dataclass(frozen=True, slots=True)
class DependencyEdge:
    src: int
    dst: int
    sync: int | None = None  # None means Directional

    @property
    def directional(self) -> bool:
        return self.sync is None


@dataclass(frozen=True, slots=True)
class CommGroup:
    id: int
    role: str
    members: tuple[int, ...]


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    detail: str = ""

    def __str__(self):
        return f"{self.rule}[{self.subject}]{': ' + self.detail if self.detail else ''}"


@dataclass
class ExecutionGraph:
    world_size: int
    nodes: dict[int, GraphNode] = field(default_factory=dict)
    rank_order: dict[int, list[int]] = field(default_factory=dict)
    directional: list[tuple[int, int]] = field(default_factory=list)
    sync_groups: dict[int, list[int]] = field(default_factory=dict)
    groups: dict[int, CommGroup] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.nodes)

    def ranks(self) -> list[int]:
        return sorted(self.rank_order)

    def edges(self) -> Iterator[DependencyEdge]:
        for s, d in self.directional:
            yield DependencyEdge(s, d)
        for sid, members in self.sync_groups.items():
            for a, b in zip(members, members[1:]):
                yield DependencyEdge(a, b, sid)

    def sync_of(self) -> dict[int, int]:
        """Map node id -> sync group id for nodes in a (non-singleton) group."""
        out = {}
        for sid, members in self.sync_groups.items():
            for m in members:
                out[m] = sid
        return out

    def predecessors(self) -> dict[int, list[int]]:
        preds: dict[int, list[int]] = defaultdict(list)
        for s, d in self.directional:
            preds[d].append(s)
        return preds

    def state(self) -> str:
        """'bare', 'timed', 'calibrated' or 'mixed'."""
        if not self.nodes:
            return "calibrated"
        durs = sum(n.duration_ns is not None for n in self.nodes.values())
        starts = sum(n.start_ns is not None for n in self.nodes.values())
        total = len(self.nodes)
        if durs == 0 and starts == 0:
            return "bare"
        if durs == total and starts == 0:
            return "timed"
        if durs == total and starts == total:
            return "calibrated"
        return "mixed"

    def copy(self) -> ExecutionGraph:
        return ExecutionGraph(
            world_size=self.world_size,
            nodes={i: replace(n) for i, n in self.nodes.items()},
            rank_order={r: list(v) for r, v in self.rank_order.items()},
            directional=list(self.directional),
            sync_groups={s: list(m) for s, m in self.sync_groups.items()},
            groups=dict(self.groups),
            meta=dict(self.meta),
        )

    def with_durations(self, durations: dict[int, int], clear_starts: bool = True) -> ExecutionGraph:
        g = self.copy()
        for nid, d in durations.items():
            node = g.nodes[nid]
            node.duration_ns = int(d)
            if clear_starts:
                node.start_ns = None
        if clear_starts:
            for node in g.nodes.values():
                node.start_ns = None
        return g

    def bare(self) -> ExecutionGraph:
        g = self.copy()
        for node in g.nodes.values():
            node.duration_ns = None
            node.start_ns = None
        return g


# -- construction -----------------------------------------------------------

class GraphBuilder:
    """Accumulates nodes in arbitrary rank interleaving, then emits a graph
    with canonical ids (rank-major, program order within a rank)."""

    def __init__(self, world_size: int, groups: dict[int, CommGroup] | None = None,
                 meta: dict[str, str] | None = None):
        self.world_size = world_size
        self.groups = dict(groups or {})
        self.meta = dict(meta or {})
        self._per_rank: dict[int, list[ComputeSpan | CommEvent]] = defaultdict(list)
        self._occurrence: dict[tuple[int, int], object] = {}
        self._members: dict[object, list[tuple[int, int]]] = defaultdict(list)

    def add(self, rank: int, op: ComputeSpan | CommEvent, occurrence=None) -> tuple[int, int]:
        pos = len(self._per_rank[rank])
        self._per_rank[rank].append(op)
        if occurrence is not None:
            self._members[occurrence].append((rank, pos))
        return rank, pos

    def build(self) -> ExecutionGraph:
        g = ExecutionGraph(self.world_size, groups=self.groups, meta=self.meta)
        ids: dict[tuple[int, int], int] = {}
        nid = 0
        for rank in sorted(self._per_rank):
            order = []
            for pos, op in enumerate(self._per_rank[rank]):
                ids[(rank, pos)] = nid
                g.nodes[nid] = GraphNode(nid, rank, op)
                order.append(nid)
                nid += 1
            g.rank_order[rank] = order
            g.directional.extend(zip(order, order[1:]))
        _assign_sync_groups(g, [[ids[m] for m in members] for members in self._members.values()])
        return g


def _assign_sync_groups(g: ExecutionGraph, member_lists: Iterable[list[int]]) -> None:
    groups = sorted(sorted(m) for m in member_lists if len(m) >= 2)
    g.sync_groups = {sid: members for sid, members in enumerate(groups)}


# -- serialization ----------------------------------------------------------

def _node_record(n: GraphNode) -> str:
    op = n.op
    if isinstance(op, ComputeSpan):
        mb = "-" if op.microbatch is None else str(op.microbatch)
        parts = ["N", str(n.id), str(n.rank), "C", op.label, mb]
    else:
        d = op.descriptor
        parts = ["N", str(n.id), str(n.rank), "M", d.kind.value, str(d.group), str(d.bytes),
                 d.reduce_op.value if d.reduce_op else "-", d.algorithm.value, op.label]
    if n.duration_ns is not None:
        parts.append(f"dur={n.duration_ns}")
    if n.start_ns is not None:
        parts.append(f"start={n.start_ns}")
    return " ".join(parts)


def serialize_graph(g: ExecutionGraph) -> bytes:
    header = [MAGIC, FORMAT_VERSION, f"world={g.world_size}"]
    header += [f"{k}={v}" for k, v in sorted(g.meta.items())]
    lines = [" ".join(header)]
    for gid in sorted(g.groups):
        grp = g.groups[gid]
        lines.append(f"G {gid} {grp.role} {','.join(map(str, grp.members))}")
    for rank in sorted(g.rank_order):
        for nid in g.rank_order[rank]:
            lines.append(_node_record(g.nodes[nid]))
    edges = sorted(g.edges(), key=lambda e: (e.src, e.dst, -1 if e.sync is None else e.sync))
    for e in edges:
        lines.append(f"E {e.src} {e.dst} D" if e.sync is None else f"E {e.src} {e.dst} S {e.sync}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise MalformedRecord(lineno, f"{what} is not an integer: {tok!r}") from None
    if v < 0:
        raise MalformedRecord(lineno, f"{what} is negative")
    return v


def _enum(cls, tok: str, lineno: int):
    try:
        return cls(tok)
    except ValueError:
        raise MalformedRecord(lineno, f"unknown {cls.__name__} {tok!r}") from None


def parse_graph(data: bytes | str, check: bool = True) -> ExecutionGraph:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    if not lines:
        raise MalformedRecord(1, "missing header")
    head = lines[0].split()
    if len(head) < 3 or head[0] != MAGIC:
        raise MalformedRecord(1, "bad header")
    if head[1] != FORMAT_VERSION:
        raise UnknownVersion(f"unsupported format version {head[1]!r}")
    meta = {}
    for tok in head[2:]:
        if "=" not in tok:
            raise MalformedRecord(1, f"bad header field {tok!r}")
        k, v = tok.split("=", 1)
        meta[k] = v
    if "world" not in meta:
        raise MalformedRecord(1, "header lacks world=")
    g = ExecutionGraph(_int(meta.pop("world"), 1, "world"), meta=meta)
    sync_members: dict[int, set[int]] = defaultdict(set)

    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        tag = tok[0]
        if tag == "G":
            if len(tok) != 4:
                raise MalformedRecord(lineno, "group record needs 3 fields")
            gid = _int(tok[1], lineno, "group id")
            members = tuple(_int(m, lineno, "member") for m in tok[3].split(",") if m)
            g.groups[gid] = CommGroup(gid, tok[2], members)
        elif tag == "N":
            g_node = _parse_node(tok, lineno)
            if g_node.id in g.nodes:
                raise MalformedRecord(lineno, f"duplicate node id {g_node.id}")
            g.nodes[g_node.id] = g_node
            g.rank_order.setdefault(g_node.rank, []).append(g_node.id)
        elif tag == "E":
            if len(tok) < 4:
                raise MalformedRecord(lineno, "edge record too short")
            src, dst = _int(tok[1], lineno, "src"), _int(tok[2], lineno, "dst")
            for nid in (src, dst):
                if nid not in g.nodes:
                    raise DanglingEdge(nid, lineno)
            if tok[3] == "D" and len(tok) == 4:
                g.directional.append((src, dst))
            elif tok[3] == "S" and len(tok) == 5:
                sid = _int(tok[4], lineno, "sync id")
                sync_members[sid].update((src, dst))
            else:
                raise MalformedRecord(lineno, f"bad edge kind {' '.join(tok[3:])!r}")
        else:
            raise MalformedRecord(lineno, f"unknown record tag {tag!r}")
    g.sync_groups = {sid: sorted(m) for sid, m in sorted(sync_members.items())}
    if check:
        problems = validate(g)
        if problems:
            raise InvalidGraph(problems)
    return g


def _parse_node(tok: list[str], lineno: int) -> GraphNode:
    opt = {}
    while tok and "=" in tok[-1]:
        k, v = tok.pop().split("=", 1)
        if k not in ("dur", "start"):
            raise MalformedRecord(lineno, f"unknown node field {k!r}")
        opt[k] = _int(v, lineno, k)
    if len(tok) < 4:
        raise MalformedRecord(lineno, "node record too short")
    nid, rank = _int(tok[1], lineno, "node id"), _int(tok[2], lineno, "rank")
    if tok[3] == "C" and len(tok) == 6:
        mb = None if tok[5] == "-" else _int(tok[5], lineno, "microbatch")
        op: ComputeSpan | CommEvent = ComputeSpan(tok[4], mb)
    elif tok[3] == "M" and len(tok) == 10:
        kind = _enum(CommKind, tok[4], lineno)
        red = None if tok[7] == "-" else _enum(ReduceOp, tok[7], lineno)
        try:
            desc = CommDescriptor(kind, _int(tok[5], lineno, "group"), _int(tok[6], lineno, "bytes"),
                                  red, _enum(Algorithm, tok[8], lineno))
        except ValueError as exc:
            raise MalformedRecord(lineno, str(exc)) from None
        op = CommEvent(desc, tok[9])
    else:
        raise MalformedRecord(lineno, "node record has wrong shape")
    return GraphNode(nid, rank, op, opt.get("dur"), opt.get("start"))


# -- validation -------------------------------------------------------------

def _units(g: ExecutionGraph):
    """Collapse each sync group into one unit; return (unit_of, unit_members)."""
    unit_of = {nid: nid for nid in g.nodes}
    members: dict[int, list[int]] = {nid: [nid] for nid in g.nodes}
    for sid, ms in g.sync_groups.items():
        rep = min(ms)
        for m in ms:
            if m in members and m != rep:
                del members[m]
            unit_of[m] = rep
        members[rep] = sorted(ms)
    return unit_of, members


def unit_order(g: ExecutionGraph) -> list[list[int]]:
    """Topological order of sync units (a unit is a sync group or a lone node).

    Ties go to the unit with the smallest node id. Raises CyclicGraph."""
    unit_of, members = _units(g)
    succ: dict[int, set[int]] = defaultdict(set)
    indeg = {u: 0 for u in members}
    for s, d in g.directional:
        us, ud = unit_of[s], unit_of[d]
        if us == ud:
            raise CyclicGraph(f"directional edge {s}->{d} inside sync unit {us}")
        if ud not in succ[us]:
            succ[us].add(ud)
            indeg[ud] += 1
    heap = [u for u, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        u = heapq.heappop(heap)
        out.append(members[u])
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(out) != len(members):
        stuck = sorted(u for u, k in indeg.items() if k > 0)[:5]
        raise CyclicGraph(f"cycle through units {stuck}")
    return out


def validate(g: ExecutionGraph) -> list[Violation]:
    out: list[Violation] = []
    add = lambda rule, subj, detail="": out.append(Violation(rule, str(subj), detail))  # noqa: E731

    for nid, n in g.nodes.items():
        if n.id != nid:
            add("IdMismatch", nid)
        if not 0 <= n.rank < max(g.world_size, 1) and g.world_size > 0:
            add("RankOutOfRange", f"node {nid}", f"rank {n.rank} >= world {g.world_size}")
        if n.start_ns is not None and n.duration_ns is None:
            add("StartWithoutDuration", f"node {nid}")
        if n.is_comm and g.groups:
            grp = g.groups.get(n.op.descriptor.group)
            if grp is None:
                add("UnknownGroup", f"node {nid}", f"group {n.op.descriptor.group}")
            elif n.rank not in grp.members:
                add("RankNotInGroup", f"node {nid}", f"rank {n.rank} not in group {grp.id}")
    if g.state() == "mixed":
        add("PartialTiming", "graph", "durations/starts must be all-or-nothing")

    # per-rank chains
    dset = set(g.directional)
    for rank, order in g.rank_order.items():
        for a, b in zip(order, order[1:]):
            if (a, b) not in dset:
                add("BrokenRankChain", f"rank {rank}", f"missing directional edge {a}->{b}")
        for nid in order:
            if g.nodes[nid].rank != rank:
                add("RankOrderMismatch", f"node {nid}")

    # sync groups
    seen: dict[int, int] = {}
    present = set(g.rank_order)
    for sid, ms in g.sync_groups.items():
        if len(ms) < 2:
            add("SingletonSyncGroup", f"sync {sid}")
        for m in ms:
            if m in seen:
                add("NodeInTwoSyncGroups", f"node {m}", f"sync {seen[m]} and {sid}")
            seen[m] = sid
        nodes = [g.nodes[m] for m in ms]
        if not all(n.is_comm for n in nodes):
            add("SyncNonComm", f"sync {sid}")
            continue
        ref = nodes[0].op.descriptor
        if not all(ref.compatible(n.op.descriptor) for n in nodes[1:]):
            add("SyncDescriptorMismatch", f"sync {sid}")
        ranks = [n.rank for n in nodes]
        if len(set(ranks)) != len(ranks):
            add("SyncDuplicateRank", f"sync {sid}")
        if ref.kind in P2P_KINDS and len(ms) != 2:
            add("P2PGroupSize", f"sync {sid}", f"{len(ms)} members")
        grp = g.groups.get(ref.group)
        if grp is not None and ref.kind not in P2P_KINDS:
            expected = set(grp.members) & present
            if set(ranks) != expected:
                add("SyncParticipantMismatch", f"sync {sid}",
                    f"members {sorted(ranks)} != participants {sorted(expected)}")

    try:
        unit_order(g)
    except CyclicGraph as exc:
        add("CycleDetected", "graph", str(exc))

    if g.state() == "calibrated":
        for s, d in g.directional:
            a, b = g.nodes[s], g.nodes[d]
            if b.start_ns < a.start_ns + a.duration_ns:
                add("DependencyViolated", f"edge {s}->{d}",
                    f"start {b.start_ns} < {a.start_ns}+{a.duration_ns}")
        for sid, ms in g.sync_groups.items():
            if len({g.nodes[m].start_ns for m in ms}) > 1:
                add("SyncStartMismatch", f"sync {sid}")
    return out


# -- queries ----------------------------------------------------------------

def topo_order(g: ExecutionGraph) -> list[int]:
    """Node ordering respecting every directional and sync-chain edge."""
    succ: dict[int, list[int]] = defaultdict(list)
    indeg = {nid: 0 for nid in g.nodes}
    for e in g.edges():
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
    heap = [n for n, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        n = heapq.heappop(heap)
        out.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(out) != len(g.nodes):
        raise CyclicGraph("graph has a cycle")
    return out


def critical_path(g: ExecutionGraph) -> tuple[list[int], int]:
    """Longest dependency chain under sync semantics.

    A sync member may not start before any member's directional
    predecessor has finished, so each member inherits the predecessors of
    its whole group. Evaluated by memoised depth-first search.
    """
    for n in g.nodes.values():
        if n.duration_ns is None:
            raise MissingDuration(f"node {n.id} has no duration")
    if not g.nodes:
        return [], 0
    dpred = g.predecessors()
    sync_of = g.sync_of()
    preds: dict[int, set[int]] = {}
    for nid in g.nodes:
        sid = sync_of.get(nid)
        ms = g.sync_groups[sid] if sid is not None else [nid]
        preds[nid] = {p for m in ms for p in dpred.get(m, ())}

    finish: dict[int, int] = {}
    best_pred: dict[int, int | None] = {}
    on_stack: set[int] = set()
    for root in sorted(g.nodes):
        if root in finish:
            continue
        stack = [(root, False)]
        while stack:
            nid, expanded = stack.pop()
            if nid in finish:
                continue
            if expanded:
                on_stack.discard(nid)
                ready, arg = 0, None
                for p in sorted(preds[nid]):
                    if finish[p] > ready:
                        ready, arg = finish[p], p
                finish[nid] = ready + g.nodes[nid].duration_ns
                best_pred[nid] = arg
                continue
            if nid in on_stack:
                raise CyclicGraph(f"cycle through node {nid}")
            on_stack.add(nid)
            stack.append((nid, True))
            for p in preds[nid]:
                if p not in finish:
                    if p in on_stack:
                        raise CyclicGraph(f"cycle through node {p}")
                    stack.append((p, False))
    end = max(sorted(finish), key=lambda n: finish[n])
    path = [end]
    while best_pred[path[-1]] is not None:
        path.append(best_pred[path[-1]])
    return path[::-1], finish[end]


def node_signature(n: GraphNode, groups_equiv: Callable[[int], object] | None = None):
    op = n.op
    if isinstance(op, ComputeSpan):
        return ("C", op.label, op.microbatch)
    d = op.descriptor
    grp = groups_equiv(d.group) if groups_equiv else d.group
    return ("M", d.kind, grp, d.bytes, d.reduce_op, d.algorithm, op.label)


def isomorphic(a: ExecutionGraph, b: ExecutionGraph, compare_groups: bool = False) -> bool:
    """Rank-preserving structural equality, independent of node/sync ids.

    Nodes are matched by (rank, position in the rank's chain). Group ids are
    compared through their member sets when both graphs carry group tables,
    otherwise ignored unless ``compare_groups`` is set.
    """
    if a.world_size != b.world_size or set(a.rank_order) != set(b.rank_order):
        return False

    def keyer(g: ExecutionGraph):
        if g.groups:
            return lambda gid: (g.groups[gid].role, g.groups[gid].members) if gid in g.groups else gid
        return (lambda gid: gid) if compare_groups else (lambda gid: None)

    pos_a = {nid: (r, i) for r, o in a.rank_order.items() for i, nid in enumerate(o)}
    pos_b = {nid: (r, i) for r, o in b.rank_order.items() for i, nid in enumerate(o)}
    ka, kb = keyer(a), keyer(b)
    for r in a.rank_order:
        oa, ob = a.rank_order[r], b.rank_order[r]
        if len(oa) != len(ob):
            return False
        for x, y in zip(oa, ob):
            if node_signature(a.nodes[x], ka) != node_signature(b.nodes[y], kb):
                return False
    if {(pos_a[s], pos_a[d]) for s, d in a.directional} != {(pos_b[s], pos_b[d]) for s, d in b.directional}:
        return False
    sa = {frozenset(pos_a[m] for m in ms) for ms in a.sync_groups.values()}
    sb = {frozenset(pos_b[m] for m in ms) for ms in b.sync_groups.values()}
    return sa == sb


def occurrence_keys(g: ExecutionGraph) -> dict[int, tuple[int, int]]:
    """(group, per-rank sequence number) of every comm node.

    Collectives match on this key: the k-th operation a rank issues on a
    group belongs to the group's k-th occurrence."""
    out = {}
    for rank, order in g.rank_order.items():
        seq: dict[int, int] = defaultdict(int)
        for nid in order:
            n = g.nodes[nid]
            if n.is_comm:
                gid = n.op.descriptor.group
                out[nid] = (gid, seq[gid])
                seq[gid] += 1
    return out


def expand_dp(template: ExecutionGraph, dp_size: int, ranks_per_replica: int,
              group_remap: Callable[[int, int], int],
              groups: dict[int, CommGroup] | None = None) -> ExecutionGraph:
    """Replicate a single data-parallel replica's graph ``dp_size`` times.

    ``group_remap(gid, k)`` returns the group id that template group ``gid``
    becomes in replica ``k``. Groups confined to a replica map to distinct
    ids per copy; groups spanning replicas (DP, EP) map several copies onto
    one id, and occurrences on them merge into cross-replica sync groups.
    """
    if dp_size < 1:
        raise ValueError("dp_size must be >= 1")
    occ = occurrence_keys(template)
    b = GraphBuilder(ranks_per_replica * dp_size, groups=groups if groups is not None else {},
                     meta=dict(template.meta))
    for k in range(dp_size):
        for rank in sorted(template.rank_order):
            if rank >= ranks_per_replica:
                raise RemapConflict(f"template rank {rank} outside replica of {ranks_per_replica}")
            new_rank = rank + k * ranks_per_replica
            for nid in template.rank_order[rank]:
                op = template.nodes[nid].op
                key = None
                if isinstance(op, CommEvent):
                    gid = group_remap(op.descriptor.group, k)
                    op = CommEvent(replace(op.descriptor, group=gid), op.label)
                    key = (gid, occ[nid][1])
                    if groups is not None:
                        grp = groups.get(gid)
                        if grp is None or new_rank not in grp.members:
                            raise RemapConflict(f"rank {new_rank} not in remapped group {gid}")
                b.add(new_rank, op, occurrence=key)
    g = b.build()
    for sid, ms in g.sync_groups.items():
        ranks = [g.nodes[m].rank for m in ms]
        if len(set(ranks)) != len(ranks):
            raise RemapConflict(f"sync group {sid} has two members on one rank")
    return g
