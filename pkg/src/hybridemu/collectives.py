"""Ring and tree all-reduce, pruned to the sandbox.

Only the sandbox ranks and their immediate virtual neighbours take part in
a pruned collective. The neighbour feeding the sandbox (the injection
rank) sends compensation values during the reduce phase so that every
sandbox-owned chunk still reaches its exact fully reduced value, and sends
recorded final values during the broadcast phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .coordinator import ShapeMismatch
from .errors import EmulationError
from .graph import Algorithm, CommDescriptor, CommGroup, CommKind, ReduceOp


class NonContiguousSandbox(EmulationError):
    pass


class MissingContribution(EmulationError):
    pass


class PlanMismatch(EmulationError):
    pass


class SandboxAdjacent(EmulationError):
    """skip_transfer was asked to elide an occurrence the sandbox takes part in."""


class Phase(str, Enum):
    REDUCE = "Reduce"
    BROADCAST = "Broadcast"
    DIRECT = "DirectExchange"


class Role(str, Enum):
    ROOT = "Root"
    LEAF = "Leaf"
    INTERMEDIATE = "Intermediate"


def decompose(kind: CommKind) -> list[Phase]:
    kind = CommKind(kind)
    if kind == CommKind.ALL_REDUCE:
        return [Phase.REDUCE, Phase.BROADCAST]
    if kind == CommKind.REDUCE_SCATTER:
        return [Phase.REDUCE]
    if kind in (CommKind.ALL_GATHER, CommKind.BROADCAST):
        return [Phase.BROADCAST]
    if kind in (CommKind.ALL_TO_ALL, CommKind.SEND, CommKind.RECV):
        return [Phase.DIRECT]
    return []  # Barrier carries no payload


# -- reduction helpers ------------------------------------------------------

def _combine(op: ReduceOp, a, b):
    if op == ReduceOp.SUM:
        return a + b
    if op == ReduceOp.MAX:
        return np.maximum(a, b)
    return np.minimum(a, b)


def identity(op: ReduceOp, dtype) -> np.generic:
    dtype = np.dtype(dtype)
    if op == ReduceOp.SUM:
        return dtype.type(0)
    big = np.iinfo(dtype) if dtype.kind in "iu" else None
    if op == ReduceOp.MAX:
        return dtype.type(big.min) if big else dtype.type(-np.inf)
    return dtype.type(big.max) if big else dtype.type(np.inf)


def _check_shapes(contributions: Mapping[int, np.ndarray]) -> None:
    shapes = {np.shape(v) for v in contributions.values()}
    if len(shapes) > 1:
        raise ShapeMismatch(f"contribution shapes differ: {sorted(shapes)}")


def full_allreduce_oracle(contributions: Mapping[int, np.ndarray], op: ReduceOp = ReduceOp.SUM
                          ) -> dict[int, np.ndarray]:
    """Reference result by an explicit element loop, ascending rank order."""
    op = ReduceOp(op)
    _check_shapes(contributions)
    ranks = sorted(contributions)
    if not ranks:
        return {}
    first = np.asarray(contributions[ranks[0]])
    flat = [np.asarray(contributions[r]).ravel().tolist() for r in ranks]
    out = []
    for i in range(first.size):
        acc = flat[0][i]
        for vec in flat[1:]:
            x = vec[i]
            if op == ReduceOp.SUM:
                acc = acc + x
            elif op == ReduceOp.MAX:
                acc = x if x > acc else acc
            else:
                acc = x if x < acc else acc
        out.append(acc)
    res = np.array(out, dtype=first.dtype).reshape(first.shape)
    return {r: res.copy() for r in ranks}


# -- ring -------------------------------------------------------------------

@dataclass(frozen=True)
class RingTopology:
    members: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.members)) != len(self.members) or not self.members:
            raise ValueError("ring members must be distinct and nonempty")

    @property
    def size(self) -> int:
        return len(self.members)

    def pos(self, rank: int) -> int:
        return self.members.index(rank)

    def owner(self, chunk: int) -> int:
        return self.members[chunk]

    def chunks(self, vec: np.ndarray) -> list[np.ndarray]:
        return np.array_split(np.asarray(vec), self.size)


@dataclass(frozen=True)
class PruningPlan:
    members: tuple[int, ...]              # ring order or tree vertex order
    sandbox: tuple[int, ...]
    neighbors: tuple[int, ...]
    injection: int | None
    compensated: tuple[int, ...]          # chunk indices needing real values
    op: ReduceOp = ReduceOp.SUM
    role: Role | None = None              # tree plans only
    tree: TreeTopology | None = None

    def describe(self) -> str:
        lines = [f"members   {' '.join(map(str, self.members))}",
                 f"sandbox   {' '.join(map(str, self.sandbox))}",
                 f"neighbors {' '.join(map(str, self.neighbors)) or '-'}",
                 f"injection {self.injection if self.injection is not None else '-'}"]
        if self.role is not None:
            lines.append(f"role      {self.role.value}")
        else:
            lines.append("chunks    " + " ".join(
                f"{c}:{'C' if c in self.compensated else 'Any'}" for c in range(len(self.members))))
        return "\n".join(lines)


def plan_ring_pruning(ring: RingTopology, sandbox: Iterable[int], op: ReduceOp = ReduceOp.SUM
                      ) -> PruningPlan:
    sb = set(sandbox)
    if not sb:
        raise ValueError("empty sandbox")
    if not sb <= set(ring.members):
        raise PlanMismatch(f"sandbox ranks {sorted(sb - set(ring.members))} not on the ring")
    k = ring.size
    pos = sorted(ring.pos(r) for r in sb)
    if len(sb) == k:
        return PruningPlan(ring.members, ring.members, (), None, (), ReduceOp(op))
    # find the block start: the sandbox position whose predecessor is virtual
    starts = [p for p in pos if ring.members[(p - 1) % k] not in sb]
    if len(starts) != 1:
        raise NonContiguousSandbox(f"sandbox {sorted(sb)} is not one contiguous ring block")
    a = starts[0]
    block = [(a + i) % k for i in range(len(sb))]
    pred = ring.members[(a - 1) % k]
    succ = ring.members[(block[-1] + 1) % k]
    neighbors = tuple(sorted({pred, succ}))
    return PruningPlan(ring.members, tuple(ring.members[p] for p in block), neighbors, pred,
                       tuple(block), ReduceOp(op))


def _need_all(plan: PruningPlan, contributions: Mapping[int, np.ndarray]) -> None:
    missing = [r for r in plan.members if r not in contributions]
    if missing:
        raise MissingContribution(f"no recorded contribution for ranks {missing[:8]}")
    _check_shapes({r: contributions[r] for r in plan.members})


def compensation_values(plan: PruningPlan, contributions: Mapping[int, np.ndarray]
                        ) -> dict[int, np.ndarray]:
    """Per-chunk value the injection rank sends in the reduce phase.

    For a sandbox-owned chunk the value is the full reduction minus what the
    sandbox ranks between the injection rank and the owner will add on the
    way (for Max/Min the full value itself, since re-applying it is
    harmless). Every other chunk is unconstrained and set to zero.
    """
    if plan.role is not None:
        raise PlanMismatch("compensation_values applies to ring plans")
    _need_all(plan, contributions)
    k = len(plan.members)
    ring = RingTopology(plan.members)
    split = {r: ring.chunks(contributions[r]) for r in plan.members}
    full = full_allreduce_oracle(contributions={r: np.asarray(contributions[r]) for r in plan.members},
                                 op=plan.op)[plan.members[0]]
    full_chunks = ring.chunks(full)
    out = {c: np.zeros_like(full_chunks[c]) for c in range(k)}
    if plan.injection is None:
        return out
    a = ring.pos(plan.sandbox[0])
    for c in plan.compensated:
        if plan.op != ReduceOp.SUM:
            out[c] = full_chunks[c].copy()
            continue
        val = full_chunks[c].copy()
        p = a
        while True:
            val = val - split[plan.members[p]][c]
            if p == c:
                break
            p = (p + 1) % k
        out[c] = val
    return out


def pruned_ring_reduce(plan: PruningPlan, contributions: Mapping[int, np.ndarray],
                       any_values: Mapping[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Reduce phase over the active ranks only. Returns each sandbox rank's
    owned chunk after K-1 steps."""
    comp = compensation_values(plan, contributions)
    if any_values:
        for c, v in any_values.items():
            if c not in plan.compensated:
                comp[c] = np.asarray(v, dtype=comp[c].dtype).reshape(comp[c].shape)
    k = len(plan.members)
    ring = RingTopology(plan.members)
    sb = set(plan.sandbox)
    own = {r: ring.chunks(contributions[r]) for r in plan.sandbox}
    # buffers hold the partial reduction each sandbox rank forwards next step
    held: dict[int, dict[int, np.ndarray]] = {r: {} for r in plan.sandbox}
    for step in range(k - 1):
        sends = {}
        for r in plan.sandbox:
            j = ring.pos(r)
            c = (j - step - 1) % k
            base = own[r][c] if step == 0 else held[r][c]
            sends[r] = (c, base)
        if plan.injection is not None:
            j = ring.pos(plan.injection)
            c = (j - step - 1) % k
            sends[plan.injection] = (c, comp[c])
        for sender, (c, val) in sends.items():
            dst = plan.members[(ring.pos(sender) + 1) % k]
            if dst in sb:
                held[dst][c] = _combine(plan.op, val, own[dst][c])
    result = {}
    for r in plan.sandbox:
        j = ring.pos(r)
        result[r] = held[r][j] if k > 1 else own[r][j]
    return result


def pruned_ring_allreduce(plan: PruningPlan, contributions: Mapping[int, np.ndarray],
                          any_values: Mapping[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Full result vector for every sandbox rank."""
    if plan.role is not None:
        raise PlanMismatch("ring execution given a tree plan")
    reduced = pruned_ring_reduce(plan, contributions, any_values)
    k = len(plan.members)
    ring = RingTopology(plan.members)
    sb = set(plan.sandbox)
    recorded = None
    if plan.injection is not None:
        full = full_allreduce_oracle({r: np.asarray(contributions[r]) for r in plan.members},
                                     plan.op)[plan.members[0]]
        recorded = ring.chunks(full)
    have: dict[int, dict[int, np.ndarray]] = {r: {ring.pos(r): reduced[r]} for r in plan.sandbox}
    for step in range(k - 1):
        sends = {}
        for r in plan.sandbox:
            c = (ring.pos(r) - step) % k
            sends[r] = (c, have[r][c])
        if plan.injection is not None:
            c = (ring.pos(plan.injection) - step) % k
            sends[plan.injection] = (c, recorded[c])
        for sender, (c, val) in sends.items():
            dst = plan.members[(ring.pos(sender) + 1) % k]
            if dst in sb:
                have[dst][c] = val
    return {r: np.concatenate([have[r][c] for c in range(k)]).reshape(np.shape(contributions[r]))
            for r in plan.sandbox}


# -- tree -------------------------------------------------------------------

@dataclass(frozen=True)
class TreeTopology:
    """Binary tree over vertices (heap layout, vertex 0 is the root). Each
    vertex stands for the ranks of one node, chained internally."""
    vertices: tuple[tuple[int, ...], ...]

    @classmethod
    def from_ranks(cls, ranks: Iterable[int], per_vertex: int) -> TreeTopology:
        ranks = list(ranks)
        if per_vertex < 1 or len(ranks) % per_vertex:
            raise ValueError("ranks must split evenly into vertices")
        return cls(tuple(tuple(ranks[i:i + per_vertex]) for i in range(0, len(ranks), per_vertex)))

    def parent(self, v: int) -> int | None:
        return None if v == 0 else (v - 1) // 2

    def children(self, v: int) -> list[int]:
        return [c for c in (2 * v + 1, 2 * v + 2) if c < len(self.vertices)]

    def vertex_of(self, rank: int) -> int:
        for v, ranks in enumerate(self.vertices):
            if rank in ranks:
                return v
        raise PlanMismatch(f"rank {rank} not in tree")

    def role(self, v: int) -> Role:
        if v == 0:
            return Role.ROOT
        return Role.INTERMEDIATE if self.children(v) else Role.LEAF


def plan_tree_pruning(tree: TreeTopology, sandbox: Iterable[int], op: ReduceOp = ReduceOp.SUM
                      ) -> PruningPlan:
    sb = tuple(sorted(set(sandbox)))
    if not sb:
        raise ValueError("empty sandbox")
    v = tree.vertex_of(sb[0])
    if set(tree.vertices[v]) != set(sb):
        raise PlanMismatch("tree sandbox must be exactly the ranks of one vertex")
    parent = tree.parent(v)
    kids = tree.children(v)
    nbr_vertices = ([parent] if parent is not None else []) + kids
    # the neighbour that supplies data to the sandbox
    if parent is None:
        injection = tree.vertices[kids[0]][0] if kids else None
    else:
        injection = tree.vertices[parent][0]
    neighbors = tuple(sorted(tree.vertices[u][0] for u in nbr_vertices))
    members = tuple(r for vs in tree.vertices for r in vs)
    return PruningPlan(members, sb, neighbors, injection, (), ReduceOp(op), tree.role(v), tree)


def _subtree_value(tree: TreeTopology, v: int, contributions, op) -> np.ndarray:
    acc = None
    for r in tree.vertices[v]:
        x = np.asarray(contributions[r])
        acc = x.copy() if acc is None else _combine(op, acc, x)
    for c in tree.children(v):
        acc = _combine(op, acc, _subtree_value(tree, c, contributions, op))
    return acc


def tree_injections(plan: PruningPlan, contributions: Mapping[int, np.ndarray],
                    any_value=None) -> dict[str, dict[int, np.ndarray]]:
    """Values the virtual neighbours send: 'up' (child vertex -> sandbox in
    the reduce phase) and 'down' (parent -> sandbox in the broadcast phase)."""
    tree, op = plan.tree, plan.op
    _need_all(plan, contributions)
    full = full_allreduce_oracle({r: np.asarray(contributions[r]) for r in plan.members},
                                 op)[plan.members[0]]
    v = tree.vertex_of(plan.sandbox[0])
    kids = tree.children(v)
    up: dict[int, np.ndarray] = {}
    down: dict[int, np.ndarray] = {}
    if plan.role == Role.ROOT:
        internal = None
        for r in tree.vertices[v]:
            x = np.asarray(contributions[r])
            internal = x.copy() if internal is None else _combine(op, internal, x)
        for i, c in enumerate(kids):
            if i == 0:
                up[c] = full - internal if op == ReduceOp.SUM else full.copy()
            else:
                up[c] = np.full_like(full, identity(op, full.dtype))
    else:
        for c in kids:
            fill = 0 if any_value is None else any_value
            up[c] = np.full_like(full, fill)
        down[tree.parent(v)] = full.copy()
    return {"up": up, "down": down}


def pruned_tree_allreduce(plan: PruningPlan, contributions: Mapping[int, np.ndarray],
                          any_value=None) -> dict[int, np.ndarray]:
    """Executes the sandbox vertex's part of a tree all-reduce: its ranks
    reduce along the intra-vertex chain, combine what the child vertices
    send, then (unless root) take the final value from the parent."""
    if plan.tree is None:
        raise PlanMismatch("tree execution given a ring plan")
    inj = tree_injections(plan, contributions, any_value)
    op = plan.op
    acc = None
    for r in plan.sandbox:
        x = np.asarray(contributions[r])
        acc = x.copy() if acc is None else _combine(op, acc, x)
    for val in inj["up"].values():
        acc = _combine(op, acc, val)
    final = acc if plan.role == Role.ROOT else next(iter(inj["down"].values()))
    return {r: final.copy() for r in plan.sandbox}


# -- group instantiation ----------------------------------------------------

@dataclass
class InstantiationPlan:
    active_groups: list[int]
    active_virtual: list[int]
    proxies: dict[int, int]
    leader: int | None
    total_groups: int

    @property
    def reduction_factor(self) -> float:
        return self.total_groups / max(len(self.active_groups), 1)


def _neighbors(members: tuple[int, ...], sandbox: set[int], alg: Algorithm | str) -> set[int]:
    k = len(members)
    out: set[int] = set()
    for i, r in enumerate(members):
        if r not in sandbox:
            continue
        if alg == "direct":
            out.update(members)
        elif alg == Algorithm.TREE:
            if i:
                out.add(members[(i - 1) // 2])
            out.update(members[c] for c in (2 * i + 1, 2 * i + 2) if c < k)
        else:
            out.add(members[(i - 1) % k])
            out.add(members[(i + 1) % k])
    return out - sandbox


def plan_instantiation(groups: Mapping[int, CommGroup], sandbox: Iterable[int],
                       hints: Mapping[int, Algorithm | str] | None = None) -> InstantiationPlan:
    """Which communicators must actually exist for a sandbox run.

    ``hints`` maps group id to Algorithm.RING, Algorithm.TREE or "direct";
    groups with role EP default to "direct" (all-to-all talks to everyone),
    the rest to ring.
    """
    sb = set(sandbox)
    hints = hints or {}
    active, virtual, proxies = [], set(), {}
    for gid in sorted(groups):
        g = groups[gid]
        if not sb.intersection(g.members):
            continue
        active.append(gid)
        alg = hints.get(gid, "direct" if g.role == "EP" else Algorithm.RING)
        nb = _neighbors(g.members, sb, alg)
        virtual |= nb
        inst = (sb & set(g.members)) | nb
        proxies[gid] = len(g.members) - len(inst)
    return InstantiationPlan(active, sorted(virtual), proxies, min(virtual) if virtual else None,
                             len(groups))


@dataclass(frozen=True)
class Completion:
    key: tuple[int, int]
    participants: tuple[int, ...]
    bytes_moved: int = 0


def skip_transfer(descriptor: CommDescriptor, key: tuple[int, int], participants: Iterable[int],
                  sandbox: Iterable[int]) -> Completion:
    """Completion metadata for an occurrence among virtual ranks only."""
    parts = tuple(participants)
    touched = set(parts) & set(sandbox)
    if touched:
        raise SandboxAdjacent(f"occurrence {key} ({descriptor.kind.value}) involves sandbox ranks "
                              f"{sorted(touched)}")
    return Completion(key, parts, 0)


# -- randomized sweep used by the CLI ---------------------------------------

@dataclass
class SweepSummary:
    ring_cases: int = 0
    ring_failures: int = 0
    tree_cases: int = 0
    tree_failures: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.ring_failures or self.tree_failures)

    def as_text(self) -> str:
        return (f"ring {self.ring_cases - self.ring_failures}/{self.ring_cases} pass\n"
                f"tree {self.tree_cases - self.tree_failures}/{self.tree_cases} pass\n"
                f"result {'PASS' if self.ok else 'FAIL'}\n")


def results_match(got: np.ndarray, want: np.ndarray, rtol: float = 1e-6) -> bool:
    got, want = np.asarray(got), np.asarray(want)
    if got.shape != want.shape:
        return False
    if want.dtype.kind in "iu":
        return bool(np.array_equal(got, want))
    return bool(np.allclose(got, want, rtol=rtol, atol=0.0))


def random_contributions(rng: np.random.Generator, ranks, length: int, floating: bool):
    if floating:
        return {r: rng.uniform(0.5, 2.0, size=length) for r in ranks}
    return {r: rng.integers(-1000, 1001, size=length, dtype=np.int64) for r in ranks}


def random_ring_case(rng: np.random.Generator):
    k = int(rng.integers(4, 65))
    block = int(rng.integers(1, 5))
    start = int(rng.integers(0, k))
    members = tuple(int(x) for x in rng.permutation(k * 3)[:k])
    sandbox = [members[(start + i) % k] for i in range(block)]
    op = [ReduceOp.SUM, ReduceOp.MAX, ReduceOp.MIN][int(rng.integers(0, 3))]
    floating = bool(rng.integers(0, 2))
    length = k * int(rng.integers(1, 3)) + int(rng.integers(0, k))
    return members, sandbox, op, random_contributions(rng, members, length, floating)


def random_tree_case(rng: np.random.Generator, role: Role):
    while True:
        nv = int(rng.integers(1, 16))
        tree_roles = [TreeTopology(tuple((i,) for i in range(nv))).role(v) for v in range(nv)]
        choices = [v for v in range(nv) if tree_roles[v] == role]
        if choices:
            break
    per = int(rng.integers(1, 5))
    tree = TreeTopology.from_ranks(range(nv * per), per)
    v = choices[int(rng.integers(0, len(choices)))]
    op = [ReduceOp.SUM, ReduceOp.MAX, ReduceOp.MIN][int(rng.integers(0, 3))]
    floating = bool(rng.integers(0, 2))
    contrib = random_contributions(rng, range(nv * per), int(rng.integers(1, 9)), floating)
    return tree, tree.vertices[v], op, contrib


def verify_sweep(cases: int, seed: int, tree_cases: int | None = None) -> SweepSummary:
    """Randomised pruned-vs-oracle comparison over ring and tree cases."""
    rng = np.random.default_rng(seed)
    out = SweepSummary()
    for i in range(cases):
        members, sandbox, op, contrib = random_ring_case(rng)
        plan = plan_ring_pruning(RingTopology(members), sandbox, op)
        got = pruned_ring_allreduce(plan, contrib)
        want = full_allreduce_oracle(contrib, op)
        out.ring_cases += 1
        if not all(results_match(got[r], want[r]) for r in sandbox):
            out.ring_failures += 1
            out.failures.append(f"ring case {i}")
    per_role = tree_cases if tree_cases is not None else max(cases // 5, 1)
    for role in Role:
        for i in range(per_role):
            tree, sandbox, op, contrib = random_tree_case(rng, role)
            plan = plan_tree_pruning(tree, sandbox, op)
            got = pruned_tree_allreduce(plan, contrib)
            want = full_allreduce_oracle(contrib, op)
            out.tree_cases += 1
            if not all(results_match(got[r], want[r]) for r in sandbox):
                out.tree_failures += 1
                out.failures.append(f"tree {role.value} case {i}")
    return out
