"""Slice planning, slice-by-slice duration filling and inter-slice
calibration of a bare execution graph."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmulationError
from .graph import CommEvent, ExecutionGraph, MissingDuration, unit_order
from .workload import CostModel, RankProgram


class InvalidSize(EmulationError):
    pass


class NotCalibrated(EmulationError):
    pass


@dataclass(frozen=True)
class Slice:
    index: int
    real_ranks: tuple[int, ...]
    assistant_ranks: tuple[int, ...]


def plan_slices(world: int, slice_size: int) -> list[Slice]:
    """Contiguous round-robin blocks: 0..k-1, k..2k-1, ...; the last may be short."""
    if not 1 <= slice_size <= max(world, 1) or world < 1:
        raise InvalidSize(f"slice size {slice_size} not in [1, {world}]")
    out = []
    everyone = range(world)
    for i, lo in enumerate(range(0, world, slice_size)):
        real = tuple(range(lo, min(lo + slice_size, world)))
        out.append(Slice(i, real, tuple(r for r in everyone if r < lo or r >= lo + slice_size)))
    return out


# -- measurement sources ----------------------------------------------------

class MeasurementSource:
    def duration(self, g: ExecutionGraph, node_id: int) -> int:
        raise NotImplementedError


@dataclass
class Simulated(MeasurementSource):
    """Cost-model durations, optionally perturbed by a relative jitter drawn
    uniformly from [-jitter, +jitter]. Each node's draw is seeded by
    (seed, node id) so results do not depend on slice order."""
    programs: dict[int, RankProgram]
    cost: CostModel
    jitter: float = 0.0
    seed: int = 0
    _pos: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def duration(self, g: ExecutionGraph, node_id: int) -> int:
        if not self._pos:
            for order in g.rank_order.values():
                for i, nid in enumerate(order):
                    self._pos[nid] = i
        node = g.nodes[node_id]
        step = self.programs[node.rank].steps[self._pos[node_id]]
        base = self.cost.step_duration(step)
        if self.jitter == 0:
            return base
        draw = np.random.default_rng([self.seed, node_id]).uniform(-self.jitter, self.jitter)
        return max(0, int(round(base * (1.0 + draw))))


@dataclass
class Imported(MeasurementSource):
    durations: dict[int, int]

    @classmethod
    def parse(cls, text: str) -> Imported:
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 2:
                raise ValueError(f"line {lineno}: expected '<node id> <duration ns>'")
            nid, dur = int(tok[0]), int(tok[1])
            if dur < 0:
                raise ValueError(f"line {lineno}: negative duration")
            out[nid] = dur
        return cls(out)

    def duration(self, g: ExecutionGraph, node_id: int) -> int:
        try:
            return self.durations[node_id]
        except KeyError:
            raise MissingDuration(f"imported durations lack node {node_id}") from None


@dataclass
class SliceTiming:
    slice: Slice
    durations: dict[int, int]
    local_starts: dict[int, int]   # slice-local timestamps of the real ranks' nodes


def fill_slice_timings(bare: ExecutionGraph, sl: Slice, src: MeasurementSource,
                       local: bool = True) -> SliceTiming:
    """Durations for every node of the slice's real ranks.

    Assistant ranks replay the bare graph, which has no timing, so they
    answer every rendezvous immediately; the real ranks' start times from
    that local run are returned as ``local_starts`` (skipped when
    ``local`` is false).
    """
    real = set(sl.real_ranks)
    durations = {}
    for r in sl.real_ranks:
        for nid in bare.rank_order.get(r, ()):
            durations[nid] = src.duration(bare, nid)
    local_starts = {}
    if local:
        probe = {nid: 0 for nid in bare.nodes}
        probe.update(durations)
        starts = _asap(bare, probe)
        local_starts = {nid: starts[nid] for nid in durations if bare.nodes[nid].rank in real}
    return SliceTiming(sl, durations, local_starts)


def fill_all(bare: ExecutionGraph, slices: list[Slice], src: MeasurementSource,
             workers: int = 1, local: bool = False) -> tuple[ExecutionGraph, list[SliceTiming]]:
    """Fill every slice and return the timed graph plus per-slice results."""
    if workers > 1:
        if isinstance(src, Simulated) and bare.nodes:
            src.duration(bare, next(iter(bare.nodes)))  # build the position index once
        with ThreadPoolExecutor(workers) as ex:
            timings = list(ex.map(lambda s: fill_slice_timings(bare, s, src, local), slices))
    else:
        timings = [fill_slice_timings(bare, s, src, local) for s in slices]
    durations = {}
    for t in timings:
        durations.update(t.durations)
    missing = set(bare.nodes) - set(durations)
    if missing:
        raise MissingDuration(f"{len(missing)} nodes not covered by any slice")
    return bare.with_durations(durations), timings


def concatenate_uncalibrated(bare: ExecutionGraph, timings: list[SliceTiming]) -> ExecutionGraph:
    """Timed graph whose start times are the raw slice-local timestamps."""
    g = bare.copy()
    for t in timings:
        if t.durations and not t.local_starts:
            raise ValueError(f"slice {t.slice.index} was filled without local timestamps")
        for nid, d in t.durations.items():
            g.nodes[nid].duration_ns = d
            g.nodes[nid].start_ns = t.local_starts[nid]
    return g


# -- calibration ------------------------------------------------------------

def _asap(g: ExecutionGraph, durations: dict[int, int]) -> dict[int, int]:
    preds = g.predecessors()
    start: dict[int, int] = {}
    for unit in unit_order(g):
        t = 0
        for m in unit:
            for p in preds.get(m, ()):
                end = start[p] + durations[p]
                if end > t:
                    t = end
        for m in unit:
            start[m] = t
    return start


def calibrate(g: ExecutionGraph) -> ExecutionGraph:
    """ASAP schedule over the timed graph.

    Sync units are visited in topological order. A unit starts once every
    member's directional predecessors have finished, and all members share
    that start. The earliest start is anchored at 0.
    """
    durations = {}
    for n in g.nodes.values():
        if n.duration_ns is None:
            raise MissingDuration(f"node {n.id} has no duration")
        durations[n.id] = n.duration_ns
    start = _asap(g, durations)
    shift = min(start.values()) if start else 0
    out = g.copy()
    for nid, node in out.nodes.items():
        node.start_ns = start[nid] - shift
    return out


def iteration_time(g: ExecutionGraph) -> int:
    if not g.nodes:
        return 0
    if g.state() != "calibrated":
        raise NotCalibrated("graph lacks start times")
    return max(n.start_ns + n.duration_ns for n in g.nodes.values()) - min(n.start_ns for n in g.nodes.values())


def makespan_of_starts(g: ExecutionGraph) -> int:
    """Makespan of whatever start times the graph carries (calibrated or not)."""
    return iteration_time(g)


def comm_nodes(g: ExecutionGraph) -> list[int]:
    return [nid for nid, n in g.nodes.items() if isinstance(n.op, CommEvent)]
