"""Hybrid emulation: sandbox ranks run their programs under the cost model,
every other rank walks the calibrated graph with recorded durations.

``simulate_full`` is a separate, graph-free simulation straight from the
rank programs. It is the reference the hybrid runs are checked against.
"""
from __future__ import annotations

import csv
import fnmatch
import heapq
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .collectives import (PlanMismatch, RingTopology, plan_instantiation, plan_ring_pruning,
                          pruned_ring_allreduce, pruned_ring_reduce, results_match, skip_transfer,
                          NonContiguousSandbox)
from .coordinator import CollectionRecord, cpu_execute_collective
from .errors import EmulationError
from .graph import CommEvent, CommKind, ComputeSpan, ExecutionGraph, MissingDuration, occurrence_keys
from .workload import Communicate, Compute, CostModel, RankProgram


class GraphProgramMismatch(EmulationError):
    pass


class PoolOverflow(EmulationError):
    pass


class UnknownLabel(EmulationError):
    pass


class UnknownRank(EmulationError):
    pass


class NotCalibratedInput(EmulationError):
    pass


# -- memory model -------------------------------------------------------------

def step_memory(step, cost: CostModel) -> tuple[int, int]:
    """(bytes added at step start, bytes released at step end)."""
    if isinstance(step, Compute):
        d = step.mem_delta
        return (d, 0) if d >= 0 else (0, -d)
    if cost.transient_comm_buffers:
        return step.descriptor.bytes, step.descriptor.bytes
    return 0, 0


def memory_timeline(steps, starts: list[int], durations: list[int], cost: CostModel
                    ) -> list[tuple[int, int]]:
    """Allocated bytes after each change, in program order, starting from the
    static footprint at t=0."""
    cur = cost.static_bytes
    out = [(0, cur)]
    for step, s, d in zip(steps, starts, durations):
        up, down = step_memory(step, cost)
        if up:
            cur += up
            out.append((s, cur))
        if down:
            cur -= down
            out.append((s + d, cur))
    return out


def peak(timeline: list[tuple[int, int]]) -> int:
    return max(b for _, b in timeline) if timeline else 0


# -- full simulation reference ------------------------------------------------

@dataclass
class FullSimResult:
    starts: dict[int, list[int]]
    durations: dict[int, list[int]]
    makespan: int
    peaks: dict[int, int]
    timelines: dict[int, list[tuple[int, int]]]


def simulate_full(programs: Mapping[int, RankProgram], cost: CostModel) -> FullSimResult:
    """Every rank executes its program; the k-th call a rank makes on a group
    joins that group's k-th rendezvous, which starts once all ranks that use
    the group have arrived. Repeated sweeps over the ranks until all finish."""
    members: dict[int, set[int]] = defaultdict(set)
    for r, prog in programs.items():
        for st in prog.steps:
            if isinstance(st, Communicate):
                members[st.descriptor.group].add(r)
    pc = {r: 0 for r in programs}
    clock = {r: 0 for r in programs}
    seq: dict[tuple[int, int], int] = defaultdict(int)
    arrivals: dict[tuple[int, int], dict[int, int]] = defaultdict(dict)
    starts = {r: [] for r in programs}
    durs = {r: [] for r in programs}
    waiting: dict[int, tuple[int, int] | None] = {r: None for r in programs}
    progress = True
    while progress:
        progress = False
        for r in sorted(programs):
            steps = programs[r].steps
            while pc[r] < len(steps):
                step = steps[pc[r]]
                d = cost.step_duration(step)
                if isinstance(step, Compute):
                    starts[r].append(clock[r])
                    durs[r].append(d)
                    clock[r] += d
                    pc[r] += 1
                    progress = True
                    continue
                g = step.descriptor.group
                if waiting[r] is None:
                    key = (g, seq[(r, g)])
                    seq[(r, g)] += 1
                    arrivals[key][r] = clock[r]
                    waiting[r] = key
                    progress = True
                key = waiting[r]
                if len(arrivals[key]) < len(members[g]):
                    break
                t0 = max(arrivals[key].values())
                starts[r].append(t0)
                durs[r].append(d)
                clock[r] = t0 + d
                waiting[r] = None
                pc[r] += 1
                progress = True
    stuck = [r for r in programs if pc[r] < len(programs[r].steps)]
    if stuck:
        raise EmulationError(f"full simulation deadlocked; ranks {stuck[:8]} waiting")
    timelines = {r: memory_timeline(programs[r].steps, starts[r], durs[r], cost) for r in programs}
    ends = [s + d for r in programs for s, d in zip(starts[r], durs[r])]
    begins = [s for r in programs for s in starts[r]]
    makespan = (max(ends) - min(begins)) if ends else 0
    return FullSimResult(starts, durs, makespan, {r: peak(t) for r, t in timelines.items()}, timelines)


# -- buffer pool --------------------------------------------------------------

@dataclass
class PoolConfig:
    gpu_capacity: int | None = None
    cpu_capacity: int | None = None
    prefetch: int = 4
    skip_transfers: bool = True


class BufferPool:
    """Recorded payloads the virtual neighbours send to the sandbox. All are
    staged in host memory before the run; up to ``prefetch`` upcoming ones
    per virtual rank are moved onto the device ahead of use, and each is
    evicted once its occurrence completes."""

    def __init__(self, cfg: PoolConfig, staged: Mapping[tuple[int, int], int],
                 schedule: Mapping[int, list[tuple[int, int]]]):
        self.cfg = cfg
        self.sizes = dict(staged)
        total = sum(self.sizes.values())
        if cfg.cpu_capacity is not None and total > cfg.cpu_capacity:
            raise PoolOverflow(f"host pool needs {total} bytes, capacity {cfg.cpu_capacity}")
        self.schedule = {r: list(q) for r, q in schedule.items()}
        self._next = {r: 0 for r in schedule}
        self.resident: dict[tuple[int, int], int] = {}
        self.used = 0
        self.max_used = 0
        self.prefetched = 0
        self.demand_loads = 0
        self.evictions = 0
        self.done: set[tuple[int, int]] = set()

    def _load(self, key) -> bool:
        size = self.sizes[key]
        cap = self.cfg.gpu_capacity
        if cap is not None and size > cap:
            raise PoolOverflow(f"payload of occurrence {key} ({size} bytes) exceeds device pool {cap}")
        if cap is not None and self.used + size > cap:
            return False
        self.resident[key] = size
        self.used += size
        self.max_used = max(self.max_used, self.used)
        return True

    def prefetch(self, rank: int) -> None:
        q = self.schedule.get(rank)
        if not q:
            return
        i = self._next[rank]
        ahead = 0
        for key in q[i:]:
            if ahead >= self.cfg.prefetch:
                break
            ahead += 1
            if key in self.resident or key in self.done:
                continue
            if not self._load(key):
                break
            self.prefetched += 1

    def consume(self, key) -> None:
        if key not in self.resident:
            self.sizes.setdefault(key, 0)
            if not self._load(key):
                # make room: evict speculative entries, nothing else is in use
                for k in list(self.resident):
                    self.used -= self.resident.pop(k)
                if not self._load(key):  # pragma: no cover - _load raised already
                    raise PoolOverflow(str(key))
            self.demand_loads += 1
        self.used -= self.resident.pop(key)
        self.done.add(key)
        self.evictions += 1
        for r, q in self.schedule.items():
            while self._next[r] < len(q) and q[self._next[r]] in self.done:
                self._next[r] += 1


# -- emulation ----------------------------------------------------------------

@dataclass
class EmulationReport:
    iteration_time: int
    sandbox: tuple[int, ...]
    peaks: dict[int, int]
    timelines: dict[int, list[tuple[int, int]]]
    node_times: dict[int, tuple[int, int]]
    node_rank: dict[int, int]
    node_label: dict[int, str]
    rank_finish: dict[int, int]
    bytes_moved: int = 0
    stats: dict[str, int] = field(default_factory=dict)
    baseline_iteration: int | None = None

    @property
    def delta_ns(self) -> int | None:
        return None if self.baseline_iteration is None else self.iteration_time - self.baseline_iteration

    def as_text(self) -> str:
        lines = [f"iteration_time_ns {self.iteration_time}",
                 f"sandbox {','.join(map(str, self.sandbox)) or '-'}"]
        for r in sorted(self.peaks):
            lines.append(f"peak_bytes[{r}] {self.peaks[r]}")
        lines.append(f"bytes_moved {self.bytes_moved}")
        for k in sorted(self.stats):
            lines.append(f"{k} {self.stats[k]}")
        if self.baseline_iteration is not None:
            lines.append(f"baseline_iteration_ns {self.baseline_iteration}")
            lines.append(f"makespan_delta_ns {self.delta_ns}")
        return "\n".join(lines) + "\n"

    def as_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "rank", "label", "start_ns", "duration_ns"])
        for nid in sorted(self.node_times):
            s, d = self.node_times[nid]
            w.writerow([nid, self.node_rank[nid], self.node_label[nid], s, d])
        return buf.getvalue()


def _same_op(node, step) -> bool:
    if isinstance(step, Compute):
        return isinstance(node.op, ComputeSpan) and node.op.label == step.label \
            and node.op.microbatch == step.microbatch
    return isinstance(node.op, CommEvent) and node.op.descriptor == step.descriptor \
        and node.op.label == step.label


def effective_durations(g: ExecutionGraph, sandbox: Iterable[int] = (),
                        programs: Mapping[int, RankProgram] | None = None,
                        cost: CostModel | None = None) -> dict[int, int]:
    """Graph durations for virtual ranks, cost-model durations for the sandbox."""
    sb = set(sandbox)
    out = {}
    for r, order in g.rank_order.items():
        if r in sb:
            if programs is None or cost is None:
                raise ValueError("sandbox ranks need programs and a cost model")
            steps = programs[r].steps
            if len(steps) != len(order):
                raise GraphProgramMismatch(f"rank {r}: program has {len(steps)} steps, graph {len(order)}")
            for nid, step in zip(order, steps):
                if not _same_op(g.nodes[nid], step):
                    raise GraphProgramMismatch(f"rank {r} node {nid} ({g.nodes[nid].label}) "
                                               f"differs from program step {step}")
                out[nid] = cost.step_duration(step)
        else:
            for nid in order:
                d = g.nodes[nid].duration_ns
                if d is None:
                    raise MissingDuration(f"node {nid} has no duration")
                out[nid] = d
    return out


def _event_run(g: ExecutionGraph, dur: Mapping[int, int]) -> dict[int, int]:
    """Discrete-event pass. Events are node completions, popped in
    (time, node id) order; a sync group starts when its last member is ready."""
    preds = g.predecessors()
    succ: dict[int, list[int]] = defaultdict(list)
    for s, d in g.directional:
        succ[s].append(d)
    waiting = {nid: len(preds.get(nid, ())) for nid in g.nodes}
    ready_at = {nid: 0 for nid in g.nodes}
    sync_of = g.sync_of()
    arrived: dict[int, int] = defaultdict(int)
    start: dict[int, int] = {}
    heap: list[tuple[int, int]] = []

    def launch(nid: int) -> None:
        sid = sync_of.get(nid)
        if sid is None:
            start[nid] = ready_at[nid]
            heapq.heappush(heap, (start[nid] + dur[nid], nid))
            return
        arrived[sid] += 1
        ms = g.sync_groups[sid]
        if arrived[sid] == len(ms):
            t0 = max(ready_at[m] for m in ms)
            for m in ms:
                start[m] = t0
                heapq.heappush(heap, (t0 + dur[m], m))

    for nid in sorted(g.nodes):
        if waiting[nid] == 0:
            launch(nid)
    while heap:
        t, nid = heapq.heappop(heap)
        for v in succ.get(nid, ()):
            if t > ready_at[v]:
                ready_at[v] = t
            waiting[v] -= 1
            if waiting[v] == 0:
                launch(v)
    if len(start) != len(g.nodes):
        raise EmulationError(f"emulation stalled with {len(g.nodes) - len(start)} nodes unscheduled")
    return start


def emulate(calibrated: ExecutionGraph, sandbox: Iterable[int] = (),
            programs: Mapping[int, RankProgram] | None = None, cost: CostModel | None = None,
            pool: PoolConfig | None = None, record: CollectionRecord | None = None,
            overrides: Mapping[int, int] | None = None) -> EmulationReport:
    """Hybrid run of one iteration.

    ``record`` (from collection) enables the numeric path: every all-reduce
    or reduce-scatter touching the sandbox is re-executed in pruned form from
    the recorded inputs and compared with the recorded outputs.
    """
    g = calibrated
    sb = tuple(sorted(set(sandbox)))
    unknown = set(sb) - set(g.rank_order)
    if unknown:
        raise UnknownRank(f"sandbox ranks {sorted(unknown)} not in graph")
    cost = cost or CostModel()
    pool = pool or PoolConfig()
    dur = effective_durations(g, sb, programs, cost)
    if overrides:
        for nid, d in overrides.items():
            dur[nid] = int(d)
    start = _event_run(g, dur)

    occ = occurrence_keys(g)
    occ_nodes: dict[tuple[int, int], list[int]] = defaultdict(list)
    for nid, key in occ.items():
        occ_nodes[key].append(nid)
    sbset = set(sb)
    plan = plan_instantiation(g.groups, sbset) if g.groups and sb else None
    # payloads the virtual side must provide to the sandbox
    staged, schedule = {}, defaultdict(list)
    touching = set()
    for key, nids in occ_nodes.items():
        ranks = {g.nodes[n].rank for n in nids}
        if ranks & sbset and ranks - sbset:
            touching.add(key)
            staged[key] = g.nodes[nids[0]].op.descriptor.bytes
    for r, order in g.rank_order.items():
        if r in sbset:
            continue
        for nid in sorted(order, key=lambda n: (start[n], n)):
            key = occ.get(nid)
            if key in touching and key not in schedule[r]:
                schedule[r].append(key)
    bp = BufferPool(pool, staged, schedule)

    stats = defaultdict(int)
    bytes_moved = 0
    completion = sorted((start[nids[0]] + max(dur[n] for n in nids), key)
                        for key, nids in occ_nodes.items())
    # idle-time prefetch: before each touching occurrence completes, every
    # virtual rank that feeds it tops up its prefetch window
    for _, key in completion:
        nids = occ_nodes[key]
        ranks = sorted({g.nodes[n].rank for n in nids})
        desc = g.nodes[nids[0]].op.descriptor
        if key in touching:
            for r in ranks:
                if r not in sbset:
                    bp.prefetch(r)
            bp.consume(key)
            stats["pruned_occurrences"] += 1
            bytes_moved += desc.bytes
            if record is not None:
                _numeric_check(desc, key, record, sbset, stats)
        elif ranks and not (set(ranks) & sbset):
            if pool.skip_transfers:
                skip_transfer(desc, key, ranks, sbset)
                stats["skipped_occurrences"] += 1
            else:
                stats["transferred_occurrences"] += 1
                bytes_moved += desc.bytes
        else:
            stats["sandbox_occurrences"] += 1
            bytes_moved += desc.bytes
    stats["prefetched"] = bp.prefetched
    stats["demand_loads"] = bp.demand_loads
    stats["evictions"] = bp.evictions
    stats["max_gpu_pool_bytes"] = bp.max_used
    stats["events"] = len(start)
    if plan is not None:
        stats["active_groups"] = len(plan.active_groups)
        stats["active_virtual_ranks"] = len(plan.active_virtual)

    timelines, peaks = {}, {}
    for r in sb:
        order = g.rank_order[r]
        steps = programs[r].steps if programs is not None else []
        tl = memory_timeline(steps, [start[n] for n in order], [dur[n] for n in order], cost)
        timelines[r], peaks[r] = tl, peak(tl)
    node_times = {nid: (start[nid], dur[nid]) for nid in g.nodes}
    if node_times:
        t0 = min(s for s, _ in node_times.values())
        it = max(s + d for s, d in node_times.values()) - t0
    else:
        it = 0
    finish = {r: max((start[n] + dur[n] for n in order), default=0) for r, order in g.rank_order.items()}
    return EmulationReport(it, sb, peaks, timelines, node_times,
                           {nid: n.rank for nid, n in g.nodes.items()},
                           {nid: n.label for nid, n in g.nodes.items()},
                           finish, bytes_moved, dict(stats))


def _numeric_check(desc, key, record: CollectionRecord, sandbox: set[int], stats) -> None:
    inputs = record.inputs.get(key)
    outputs = record.outputs.get(key)
    if not inputs or not outputs or set(inputs) != set(record.participants.get(key, ())):
        return
    ring = RingTopology(tuple(sorted(inputs)))
    inside = [r for r in ring.members if r in sandbox]
    if desc.kind in (CommKind.ALL_REDUCE, CommKind.REDUCE_SCATTER):
        try:
            plan = plan_ring_pruning(ring, inside, desc.reduce_op)
        except (NonContiguousSandbox, PlanMismatch):
            stats["numeric_skipped"] += 1
            return
        if desc.kind == CommKind.ALL_REDUCE:
            got = pruned_ring_allreduce(plan, inputs)
        else:
            owned = pruned_ring_reduce(plan, inputs)
            got = {r: owned[r] for r in inside}
    else:
        got = cpu_execute_collective(desc, inputs, list(ring.members))
    stats["numeric_checks"] += 1
    for r in inside:
        if not results_match(got[r], outputs[r]):
            stats["numeric_mismatches"] += 1
            break


# -- what-if and fault injection ---------------------------------------------

def resolve_overrides(g: ExecutionGraph, overrides: Mapping[str | int, int]) -> dict[int, int]:
    """Node-label patterns (fnmatch) or node ids -> duration in ns."""
    out = {}
    for key, val in overrides.items():
        if isinstance(key, int):
            if key not in g.nodes:
                raise UnknownLabel(f"no node {key}")
            out[key] = int(val)
            continue
        hits = [nid for nid, n in g.nodes.items() if fnmatch.fnmatchcase(n.label, key)]
        if not hits:
            raise UnknownLabel(f"no node label matches {key!r}")
        for nid in hits:
            out[nid] = int(val)
    return out


def what_if(calibrated: ExecutionGraph, overrides: Mapping[str | int, int], **kw) -> EmulationReport:
    resolved = resolve_overrides(calibrated, overrides)
    base = emulate(calibrated, **kw)
    rep = emulate(calibrated, overrides=resolved, **kw)
    rep.baseline_iteration = base.iteration_time
    return rep


def fault_inject(calibrated: ExecutionGraph, rank: int, compute_slowdown: float, **kw) -> EmulationReport:
    """Slow one rank's compute by a factor and re-run."""
    if rank not in calibrated.rank_order:
        raise UnknownRank(f"rank {rank} not in graph")
    if not np.isfinite(compute_slowdown) or compute_slowdown <= 0:
        raise ValueError("slowdown must be a positive finite factor")
    base = emulate(calibrated, **kw)
    over = {nid: int(round(base.node_times[nid][1] * compute_slowdown))
            for nid in calibrated.rank_order[rank] if not calibrated.nodes[nid].is_comm}
    rep = emulate(calibrated, overrides=over, **kw)
    rep.baseline_iteration = base.iteration_time
    return rep


# -- chrome trace ---------------------------------------------------------------

def export_chrome_trace(report: EmulationReport) -> bytes:
    events = []
    for nid in sorted(report.node_times):
        s, d = report.node_times[nid]
        events.append({"name": report.node_label[nid], "ph": "X",
                       "ts": round(s / 1000, 3), "dur": round(d / 1000, 3),
                       "pid": report.node_rank[nid], "tid": 0, "args": {"node": nid}})
    return json.dumps({"traceEvents": events}, separators=(",", ":")).encode()


def parse_chrome_trace(data: bytes | str) -> dict[int, tuple[float, float]]:
    """node id -> (ts, dur) in microseconds."""
    doc = json.loads(data)
    return {e["args"]["node"]: (e["ts"], e["dur"]) for e in doc["traceEvents"] if e.get("ph") == "X"}
