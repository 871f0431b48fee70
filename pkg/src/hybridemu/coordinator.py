"""Bare-graph collection by multiplexing logical ranks over a few execution
slots.

Each rank runs until it reaches a communication step. If the collective
cannot complete, its input is staged in a CPU tensor store and the slot may
be handed to another rank chosen by :meth:`Coordinator.select_switch`. Once
every participant has staged its input the collective is executed on the
CPU and the waiting ranks become runnable again. Injection rules let a rank
synthesise a collective's result locally and skip the rendezvous entirely.
"""
from __future__ import annotations

import fnmatch
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .errors import EmulationError
from .graph import (CommDescriptor, CommEvent, CommKind, ComputeSpan, ExecutionGraph,
                    GraphBuilder, ReduceOp)
from .workload import Communicate, Compute, CostModel, RankProgram

CHUNK_ELEMS = 2


class Deadlock(EmulationError):
    pass


class StoreOverflow(EmulationError):
    pass


class ShapeMismatch(EmulationError):
    pass


class Status(str, Enum):
    RUNNING = "Running"
    BLOCKED = "Blocked"
    FROZEN = "Frozen"
    FINISHED = "Finished"


class RuleKind(str, Enum):
    CONSTANT_STATUS = "ConstantStatus"
    IN_RANGE_INDEX = "InRangeIndex"
    ZERO_SPLITS = "ZeroSplits"


@dataclass(frozen=True)
class InjectionRule:
    kind: RuleKind
    label: str = "*"                 # fnmatch pattern on the step label
    comm_kind: CommKind | None = None
    vocab: int = 1000
    length: int = 8

    def matches(self, descriptor: CommDescriptor, label: str) -> bool:
        if self.comm_kind is not None and descriptor.kind != self.comm_kind:
            return False
        return fnmatch.fnmatchcase(label, self.label)

    @classmethod
    def parse(cls, text: str) -> InjectionRule:
        """``"InRangeIndex label=batch.* kind=Broadcast vocab=1000"``"""
        tok = text.split()
        if not tok:
            raise ValueError("empty injection rule")
        kw = {}
        for t in tok[1:]:
            k, _, v = t.partition("=")
            if k == "label":
                kw["label"] = v
            elif k == "kind":
                kw["comm_kind"] = CommKind(v)
            elif k in ("vocab", "length"):
                kw[k] = int(v)
            else:
                raise ValueError(f"unknown injection rule field {k!r}")
        return cls(RuleKind(tok[0]), **kw)


def apply_injection(rules: Iterable[InjectionRule], descriptor: CommDescriptor, label: str,
                    participants: int = 1, seed: int = 0) -> np.ndarray | None:
    """Synthesised collective result from the first matching rule, or None."""
    for rule in rules:
        if not rule.matches(descriptor, label):
            continue
        if rule.kind == RuleKind.CONSTANT_STATUS:
            return np.ones(1, dtype=np.int64)
        if rule.kind == RuleKind.IN_RANGE_INDEX:
            rng = np.random.default_rng([seed, descriptor.group, rule.length])
            return rng.integers(0, rule.vocab, size=rule.length, dtype=np.int64)
        # one split size per peer, all zero: nothing arrives from anyone
        return np.zeros(max(participants, 1), dtype=np.int64)
    return None


# -- CPU collective execution -----------------------------------------------

_REDUCERS = {ReduceOp.SUM: np.add, ReduceOp.MAX: np.maximum, ReduceOp.MIN: np.minimum}


def reduce_arrays(arrays: list[np.ndarray], op: ReduceOp) -> np.ndarray:
    out = np.array(arrays[0], copy=True)
    fn = _REDUCERS[op]
    for a in arrays[1:]:
        out = fn(out, a)
    return out


def cpu_execute_collective(descriptor: CommDescriptor, payloads: dict[int, np.ndarray],
                           order: list[int] | None = None) -> dict[int, np.ndarray]:
    """Run one collective on host arrays. ``order`` is the member order
    (ring position / root first); defaults to ascending rank."""
    ranks = list(order) if order is not None else sorted(payloads)
    if set(ranks) != set(payloads):
        raise ShapeMismatch("payload ranks differ from participant order")
    arrs = [np.asarray(payloads[r]) for r in ranks]
    k = len(ranks)
    kind = descriptor.kind
    if kind == CommKind.BARRIER:
        return {r: np.zeros(0, dtype=np.int64) for r in ranks}
    if kind in (CommKind.ALL_REDUCE, CommKind.REDUCE_SCATTER, CommKind.ALL_GATHER):
        if len({a.shape for a in arrs}) > 1:
            raise ShapeMismatch(f"{kind.value} payload shapes differ: {[a.shape for a in arrs]}")
    if kind == CommKind.ALL_REDUCE:
        total = reduce_arrays(arrs, descriptor.reduce_op)
        return {r: total.copy() for r in ranks}
    if kind == CommKind.REDUCE_SCATTER:
        total = reduce_arrays(arrs, descriptor.reduce_op)
        if total.size % k:
            raise ShapeMismatch(f"length {total.size} not divisible by {k} ranks")
        parts = np.split(total, k)
        return {r: parts[i].copy() for i, r in enumerate(ranks)}
    if kind == CommKind.ALL_GATHER:
        full = np.concatenate(arrs)
        return {r: full.copy() for r in ranks}
    if kind == CommKind.BROADCAST:
        return {r: arrs[0].copy() for r in ranks}
    if kind == CommKind.ALL_TO_ALL:
        if any(a.size % k for a in arrs):
            raise ShapeMismatch(f"all-to-all payloads must split into {k} segments")
        segs = [np.split(a, k) for a in arrs]
        return {r: np.concatenate([segs[i][j] for i in range(k)]) for j, r in enumerate(ranks)}
    if kind in (CommKind.SEND, CommKind.RECV):
        if k != 2:
            raise ShapeMismatch("point-to-point needs exactly two participants")
        return {ranks[0]: arrs[1].copy(), ranks[1]: arrs[0].copy()}
    raise ShapeMismatch(f"unsupported kind {kind}")  # pragma: no cover


def make_payload(descriptor: CommDescriptor, participants: int, seed: int, key, rank: int) -> np.ndarray:
    """Deterministic small integer stand-in for a rank's communication input."""
    kind = descriptor.kind
    if kind == CommKind.BARRIER:
        return np.zeros(0, dtype=np.int64)
    n = CHUNK_ELEMS * max(participants, 1)
    if kind == CommKind.ALL_GATHER:
        n = CHUNK_ELEMS
    rng = np.random.default_rng([seed, key[0], key[1], rank])
    return rng.integers(-100, 101, size=n, dtype=np.int64)


# -- coordinator state ------------------------------------------------------

@dataclass
class RankState:
    rank: int
    affinity: int
    status: Status = Status.FROZEN
    gpu_slot: int | None = None
    pc: int = 0
    pending_ops: int = 0
    head_op: tuple[int, int] | None = None   # occurrence the rank waits on
    started: bool = False

    def head_ready(self, occ: dict) -> bool:
        if self.status == Status.FINISHED:
            return False
        if self.head_op is None:
            return True
        return occ[self.head_op].complete


@dataclass
class Occurrence:
    key: tuple[int, int]
    descriptor: CommDescriptor
    participants: tuple[int, ...]
    arrived: dict[int, np.ndarray] = field(default_factory=dict)
    injected: set[int] = field(default_factory=set)
    counted: set[int] = field(default_factory=set)  # ranks whose pending_ops include this
    complete: bool = False
    outputs: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def staged(self) -> bool:
        return bool(self.arrived) and not self.complete

    def remaining(self) -> list[int]:
        return [r for r in self.participants if r not in self.arrived and r not in self.injected]


@dataclass
class CollectiveRequest:
    sender: int
    descriptor: CommDescriptor
    participants: tuple[int, ...]
    key: tuple[int, int]
    payload: np.ndarray


@dataclass
class CollectionStats:
    swaps: int = 0            # swap-outs of unfinished ranks
    swap_ins: int = 0
    swap_cost_ns: int = 0
    cpu_collectives: int = 0
    direct_collectives: int = 0
    injected: int = 0
    activations: int = 0
    store_peak_bytes: int = 0
    spilled_bytes: int = 0
    occurrences: int = 0

    def as_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in vars(self).items())


@dataclass
class CollectionRecord:
    """Inputs and outputs of every collective occurrence, keyed by
    (group, sequence). Used later to stage replay tensors and to check
    pruned collectives."""
    descriptors: dict[tuple[int, int], CommDescriptor] = field(default_factory=dict)
    participants: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)
    inputs: dict[tuple[int, int], dict[int, np.ndarray]] = field(default_factory=dict)
    outputs: dict[tuple[int, int], dict[int, np.ndarray]] = field(default_factory=dict)


class TensorStore:
    def __init__(self, capacity: int | None = None, spill: bool = False):
        self.capacity = capacity
        self.spill = spill
        self.used = 0
        self.peak = 0
        self.spilled = 0
        self._held: dict[tuple, int] = {}

    def put(self, key, nbytes: int) -> None:
        if self.capacity is not None and self.used + nbytes > self.capacity:
            if not self.spill:
                raise StoreOverflow(f"tensor store full ({self.used}+{nbytes} > {self.capacity} bytes)")
            self.spilled += nbytes
            self._held[key] = 0
            return
        self._held[key] = nbytes
        self.used += nbytes
        self.peak = max(self.peak, self.used)

    def release(self, key) -> None:
        self.used -= self._held.pop(key, 0)


class Coordinator:
    """Deterministic event loop over logical ranks."""

    def __init__(self, programs: dict[int, RankProgram], n_slots: int,
                 rules: Iterable[InjectionRule] = (), seed: int = 0,
                 cost: CostModel | None = None, store_capacity: int | None = None,
                 spill: bool = False, world: int | None = None, groups=None,
                 on_event: Callable[[Coordinator, str], None] | None = None):
        if n_slots < 1:
            raise ValueError("n_slots must be >= 1")
        self.programs = programs
        self.n_slots = n_slots
        self.rules = list(rules)
        self.seed = seed
        self.cost = cost or CostModel()
        self.store = TensorStore(store_capacity, spill)
        self.world = world if world is not None else (max(programs) + 1 if programs else 0)
        self.on_event = on_event
        self.stats = CollectionStats()
        self.record = CollectionRecord()
        self.log: list[tuple] = []
        self.builder = GraphBuilder(self.world, groups=dict(groups) if groups else {})

        members: dict[int, set[int]] = defaultdict(set)
        for r, prog in programs.items():
            for st in prog.steps:
                if isinstance(st, Communicate):
                    members[st.descriptor.group].add(r)
        self.participants = {g: tuple(sorted(m)) for g, m in members.items()}
        self.state = {r: RankState(r, affinity=r % n_slots) for r in sorted(programs)}
        self.occ: dict[tuple[int, int], Occurrence] = {}
        self._seq: dict[tuple[int, int], int] = defaultdict(int)
        self.resident: dict[int, int | None] = {s: None for s in range(n_slots)}

    # -- Alg. SelectSwitch ----------------------------------------------------
    def select_switch(self, trigger: int) -> int | None:
        """Frozen rank on the trigger's slot whose head op is ready and whose
        pending_ops is maximal (strictly positive); lowest rank wins ties."""
        gpu = self.state[trigger].affinity
        best, max_pending = None, 0
        for rank in sorted(self.state):
            st = self.state[rank]
            if rank == trigger or st.status == Status.FINISHED:
                continue
            if st.affinity != gpu or st.gpu_slot is not None:
                continue
            if not st.head_ready(self.occ):
                continue
            if st.pending_ops > max_pending:
                max_pending, best = st.pending_ops, rank
        return best

    # -- Alg. HandleCollective ------------------------------------------------
    def handle_collective(self, req: CollectiveRequest) -> list[tuple]:
        actions: list[tuple] = []
        o = self._occurrence(req.key, req.descriptor)
        r = req.sender
        first = not o.arrived
        o.arrived[r] = req.payload
        self.store.put((req.key, r), req.descriptor.bytes)
        remaining = o.remaining()
        self._uncount(o, r)
        if first and remaining:
            for w in remaining:
                self.state[w].pending_ops += 1
            o.counted.update(remaining)
            actions.append(("UpdatePendingOps", tuple(remaining)))
        st = self.state[r]
        if not remaining:
            self._execute(o)
            kind = "ExecuteDirect" if self._all_on_gpu(o.participants) else "ExecuteCPU"
            actions.append((kind, req.key))
            return actions
        st.head_op = req.key
        if self._all_on_gpu(o.participants):
            st.status = Status.BLOCKED
            actions.append(("Block", r))
            return actions
        cand = self.select_switch(r)
        if cand is None:
            st.status = Status.BLOCKED
            actions.append(("Block", r))
        else:
            self._freeze(r)
            actions.append(("FreezeRank", r))
            self._activate(cand, st.affinity)
            actions.append(("ActivateRank", cand))
            actions.append(("StoreTensors", req.key))
        return actions

    # -- internals ------------------------------------------------------------
    def _occurrence(self, key, desc) -> Occurrence:
        o = self.occ.get(key)
        if o is None:
            o = Occurrence(key, desc, self.participants[desc.group])
            self.occ[key] = o
            self.stats.occurrences += 1
        return o

    def _uncount(self, o: Occurrence, r: int) -> None:
        if r in o.counted:
            o.counted.discard(r)
            self.state[r].pending_ops -= 1

    def _all_on_gpu(self, ranks) -> bool:
        return all(self.state[r].gpu_slot is not None for r in ranks)

    def _execute(self, o: Occurrence) -> None:
        real = {r: p for r, p in o.arrived.items()}
        outputs = cpu_execute_collective(o.descriptor, real, sorted(real)) if real else {}
        o.outputs.update(outputs)
        o.complete = True
        for r in real:
            self.store.release((o.key, r))
        if not real:
            pass
        elif self._all_on_gpu(o.participants):
            self.stats.direct_collectives += 1
        else:
            self.stats.cpu_collectives += 1
        self.record.inputs[o.key] = real
        self.record.outputs[o.key] = dict(o.outputs)
        self.record.descriptors[o.key] = o.descriptor
        self.record.participants[o.key] = o.participants
        for rank in o.participants:
            st = self.state[rank]
            if st.head_op == o.key and st.status == Status.BLOCKED:
                st.status = Status.RUNNING
                st.head_op = None
                st.pc += 1

    def _freeze(self, r: int) -> None:
        st = self.state[r]
        self.resident[st.gpu_slot] = None
        st.gpu_slot = None
        st.status = Status.FROZEN
        self.stats.swaps += 1
        self.stats.swap_cost_ns += self.cost.swap_out_ns
        self.log.append(("freeze", r))

    def _activate(self, r: int, slot: int) -> None:
        st = self.state[r]
        assert self.resident[slot] is None
        self.resident[slot] = r
        st.gpu_slot = slot
        if st.started:
            self.stats.swap_ins += 1
            self.stats.swap_cost_ns += self.cost.swap_in_ns
        st.started = True
        self.stats.activations += 1
        self.log.append(("activate", r))
        if st.head_op is not None and self.occ[st.head_op].complete:
            st.head_op = None
            st.pc += 1
        st.status = Status.RUNNING

    def _emit(self, what: str) -> None:
        if self.on_event is not None:
            self.on_event(self, what)

    def _advance(self, r: int) -> None:
        st = self.state[r]
        steps = self.programs[r].steps
        while st.status == Status.RUNNING:
            if st.pc >= len(steps):
                st.status = Status.FINISHED
                slot = st.gpu_slot
                self.resident[slot] = None
                st.gpu_slot = None
                self._emit("finish")
                return
            step = steps[st.pc]
            if isinstance(step, Compute):
                self.builder.add(r, ComputeSpan(step.label, step.microbatch))
                st.pc += 1
                continue
            desc = step.descriptor
            key = (desc.group, self._seq[(r, desc.group)])
            self._seq[(r, desc.group)] += 1
            self.builder.add(r, CommEvent(desc, step.label), occurrence=key)
            o = self._occurrence(key, desc)
            synth = apply_injection(self.rules, desc, step.label, len(o.participants), self.seed)
            if synth is not None:
                o.injected.add(r)
                self._uncount(o, r)
                o.outputs[r] = synth
                self.stats.injected += 1
                if not o.remaining() and not o.complete:
                    self._execute(o)
                st.pc += 1
                self._emit("inject")
                continue
            payload = make_payload(desc, len(o.participants), self.seed, key, r)
            acts = self.handle_collective(CollectiveRequest(r, desc, o.participants, key, payload))
            self.log.extend(acts)
            if acts and acts[-1][0] in ("ExecuteDirect", "ExecuteCPU"):
                st.pc += 1
            self._emit("collective")

    def _fill_idle(self) -> bool:
        """Give every empty or stuck slot something to do; True on progress."""
        progressed = False
        for slot in range(self.n_slots):
            res = self.resident[slot]
            if res is not None:
                st = self.state[res]
                if st.status == Status.RUNNING:
                    progressed = True
                    continue
                if st.status == Status.BLOCKED:
                    if st.head_op is not None and self.occ[st.head_op].complete:
                        st.head_op = None
                        st.pc += 1
                        st.status = Status.RUNNING
                        progressed = True
                        continue
                    cand = self.select_switch(res) or self._fallback(slot, exclude=res)
                    if cand is not None:
                        self._freeze(res)
                        self._activate(cand, slot)
                        progressed = True
                continue
            cand = self._fallback(slot)
            if cand is not None:
                self._activate(cand, slot)
                progressed = True
        return progressed

    def _fallback(self, slot: int, exclude: int | None = None) -> int | None:
        best = None
        for rank in sorted(self.state):
            st = self.state[rank]
            if rank == exclude or st.affinity != slot or st.gpu_slot is not None:
                continue
            if st.head_ready(self.occ) and (best is None or st.pending_ops > self.state[best].pending_ops):
                best = rank
        return best

    def run(self) -> tuple[ExecutionGraph, CollectionStats, CollectionRecord]:
        while True:
            running = [r for r in self.resident.values()
                       if r is not None and self.state[r].status == Status.RUNNING]
            if running:
                self._advance(min(running))
                self.stats.store_peak_bytes = self.store.peak
                continue
            if all(st.status == Status.FINISHED for st in self.state.values()):
                break
            if not self._fill_idle():
                blocked = sorted(r for r, st in self.state.items() if st.status != Status.FINISHED)
                raise Deadlock(f"no runnable rank; waiting ranks {blocked[:10]}")
        self.stats.spilled_bytes = self.store.spilled
        self.stats.store_peak_bytes = self.store.peak
        return self.builder.build(), self.stats, self.record


def run_collection(programs: dict[int, RankProgram], n_slots: int,
                   rules: Iterable[InjectionRule] = (), seed: int = 0, **kw):
    """Collect the bare graph. Returns (graph, stats, record)."""
    return Coordinator(programs, n_slots, rules, seed, **kw).run()
