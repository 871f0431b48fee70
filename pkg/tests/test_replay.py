import fnmatch
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridemu.calibration import Simulated, calibrate, fill_all, iteration_time, plan_slices
from hybridemu.coordinator import run_collection
from hybridemu.graph import (CommDescriptor, CommEvent, CommGroup, CommKind, ComputeSpan, GraphBuilder,
                             ReduceOp, critical_path, parse_graph)
from hybridemu.replay import (EmulationReport, GraphProgramMismatch, PoolConfig, PoolOverflow,
                              UnknownLabel, UnknownRank, emulate, export_chrome_trace, fault_inject,
                              parse_chrome_trace, simulate_full, what_if)
from hybridemu.workload import CostModel, ParallelismSpec, build_groups, build_programs, preset

FIXTURES = Path(__file__).parent / "fixtures"


def pipeline(spec, cost=None, br=None):
    cost = cost or CostModel()
    groups = build_groups(spec)
    progs = build_programs(spec, cost, br, groups)
    bare, _, record = run_collection(progs, spec.world, groups=groups)
    timed, _ = fill_all(bare, plan_slices(spec.world, min(8, spec.world)), Simulated(progs, cost))
    return calibrate(timed), progs, cost, record


@pytest.fixture(scope="module")
def small():
    return pipeline(ParallelismSpec(tp=2, pp=2, dp=2, ep=2, ga=4))


def with_durations(g, over):
    h = g.copy()
    for nid, d in over.items():
        h.nodes[nid].duration_ns = d
    return h


# -- equivalence ---------------------------------------------------------------

def test_whole_world_sandbox_equals_calibrated(small):
    cal, progs, cost, _ = small
    rep = emulate(cal, range(8), progs, cost)
    assert rep.iteration_time == iteration_time(cal) == simulate_full(progs, cost).makespan


@pytest.mark.parametrize("block", [1, 2, 4, 8])
def test_hybrid_equals_full_for_every_block(small, block):
    cal, progs, cost, record = small
    full = simulate_full(progs, cost)
    for lo in range(0, 8, block):
        sb = range(lo, lo + block)
        rep = emulate(cal, sb, progs, cost, record=record)
        assert rep.iteration_time == full.makespan
        assert {r: rep.peaks[r] for r in sb} == {r: full.peaks[r] for r in sb}
        assert rep.stats.get("numeric_mismatches", 0) == 0


def test_numeric_path_runs_and_matches(small):
    cal, progs, cost, record = small
    rep = emulate(cal, [0, 1], progs, cost, record=record)
    assert rep.stats["numeric_checks"] > 0
    assert rep.stats.get("numeric_mismatches", 0) == 0


def test_event_count(small):
    cal, progs, cost, _ = small
    assert emulate(cal, [3], progs, cost).stats["events"] == len(cal)


def test_deterministic(small):
    cal, progs, cost, _ = small
    a = emulate(cal, [0, 1], progs, cost)
    b = emulate(cal, [0, 1], progs, cost)
    assert a.as_text() == b.as_text() and a.as_csv() == b.as_csv()


# -- errors ----------------------------------------------------------------------

def test_stale_graph_detected(small):
    cal, _, cost, _ = small
    other = build_programs(ParallelismSpec(tp=2, pp=2, dp=2, ep=2, ga=2))
    with pytest.raises(GraphProgramMismatch):
        emulate(cal, [0], other, cost)


def test_unknown_sandbox_rank(small):
    cal, progs, cost, _ = small
    with pytest.raises(UnknownRank):
        emulate(cal, [99], progs, cost)


def test_pool_overflow_names_occurrence(small):
    cal, progs, cost, _ = small
    with pytest.raises(PoolOverflow) as exc:
        emulate(cal, [0], progs, cost, PoolConfig(gpu_capacity=1 << 20))
    assert "occurrence" in str(exc.value)
    with pytest.raises(PoolOverflow):
        emulate(cal, [0], progs, cost, PoolConfig(cpu_capacity=1 << 20))


@pytest.mark.parametrize("cap,k", [(None, 4), (3 << 30, 2), (4 << 30, 1), (8 << 30, 0)])
def test_pool_invariants(small, cap, k):
    cal, progs, cost, _ = small
    rep = emulate(cal, [0, 1], progs, cost, PoolConfig(gpu_capacity=cap, prefetch=k))
    s = rep.stats
    if cap is not None:
        assert s["max_gpu_pool_bytes"] <= cap
    assert s["evictions"] == s["pruned_occurrences"]
    assert s["prefetched"] + s["demand_loads"] >= s["evictions"]
    if k == 0:
        assert s["prefetched"] == 0


def test_skip_transfers_ab(small):
    cal, progs, cost, _ = small
    on = emulate(cal, [0, 1], progs, cost, PoolConfig(skip_transfers=True))
    off = emulate(cal, [0, 1], progs, cost, PoolConfig(skip_transfers=False))
    assert on.node_times == off.node_times and on.peaks == off.peaks
    assert on.stats["skipped_occurrences"] == off.stats["transferred_occurrences"] > 0
    assert on.bytes_moved < off.bytes_moved


# -- what-if ---------------------------------------------------------------

def test_what_if_identity(small):
    cal, progs, cost, _ = small
    base = emulate(cal)
    rep = what_if(cal, {})
    assert rep.node_times == base.node_times and rep.delta_ns == 0


def test_what_if_halved_forwards_single_stage():
    cal, *_ = pipeline(ParallelismSpec(ga=4))
    fwd = [n for n in cal.nodes.values() if n.label == "fwd"]
    rep = what_if(cal, {"fwd": fwd[0].duration_ns // 2})
    assert -rep.delta_ns == sum(n.duration_ns - n.duration_ns // 2 for n in fwd)


def test_what_if_matches_critical_path_oracle(small):
    cal, *_ = small
    for pattern, value in (("bwd", 1_000_000), ("fwd*", 30_000_000), ("pp.*", 0), ("optim", 90_000_000)):
        rep = what_if(cal, {pattern: value})
        over = {nid: value for nid, n in cal.nodes.items() if fnmatch.fnmatchcase(n.label, pattern)}
        assert rep.iteration_time == critical_path(with_durations(cal, over))[1]


def test_what_if_off_critical_node_unchanged():
    cal = parse_graph((FIXTURES / "pipeline4.ptg").read_bytes())
    base = critical_path(cal)[1]
    checked = 0
    for nid, n in sorted(cal.nodes.items()):
        shorter = int(n.duration_ns * 0.9)
        if n.duration_ns and critical_path(with_durations(cal, {nid: shorter}))[1] == base:
            assert what_if(cal, {nid: shorter}).delta_ns == 0
            checked += 1
    assert checked > 10


def test_what_if_unknown_label(small):
    with pytest.raises(UnknownLabel):
        what_if(small[0], {"no.such.label": 1})
    with pytest.raises(UnknownLabel):
        what_if(small[0], {10**9: 1})


# -- fault injection -----------------------------------------------------------

def test_fault_identity(small):
    rep = fault_inject(small[0], 3, 1.0)
    assert rep.delta_ns == 0


def test_fault_on_demo_matches_oracle():
    g = parse_graph((FIXTURES / "demo_1f1b.ptg").read_bytes())
    for rank in (0, 1):
        rep = fault_inject(g, rank, 1.12)
        over = {nid: int(round(g.nodes[nid].duration_ns * 1.12))
                for nid in g.rank_order[rank] if not g.nodes[nid].is_comm}
        assert rep.delta_ns > 0
        assert rep.iteration_time == critical_path(with_durations(g, over))[1]


def slack_fixture():
    """Rank 0 all-reduces then computes for 100; rank 1 then computes for 10."""
    groups = {0: CommGroup(0, "W", (0, 1))}
    b = GraphBuilder(2, groups)
    for r in (0, 1):
        b.add(r, CommEvent(CommDescriptor(CommKind.ALL_REDUCE, 0, 8, ReduceOp.SUM)), occurrence=(0, 0))
        b.add(r, ComputeSpan("fwd"))
    g = b.build()
    for r, work in ((0, 100), (1, 10)):
        a, c = g.rank_order[r]
        g.nodes[a].duration_ns, g.nodes[c].duration_ns = 1, work
    return calibrate(g)


def test_fault_off_path_rank_has_slack():
    g = slack_fixture()
    base = emulate(g)
    rep = fault_inject(g, 1, 1.12)
    assert rep.delta_ns == 0
    assert rep.rank_finish[1] > base.rank_finish[1]
    assert rep.rank_finish[1] == 1 + 11


def test_fault_errors(small):
    with pytest.raises(UnknownRank):
        fault_inject(small[0], 42, 1.1)
    with pytest.raises(ValueError):
        fault_inject(small[0], 0, float("inf"))


# -- chrome trace -------------------------------------------------------------

def test_chrome_empty():
    rep = EmulationReport(0, (), {}, {}, {}, {}, {}, {})
    assert export_chrome_trace(rep) == b'{"traceEvents":[]}'


def test_chrome_three_nodes():
    rep = EmulationReport(30, (), {}, {}, {0: (0, 10), 1: (10, 5), 2: (1500, 20)},
                          {0: 0, 1: 0, 2: 1}, {0: "fwd", 1: "bwd", 2: "fwd"}, {})
    doc = json.loads(export_chrome_trace(rep))
    assert len(doc["traceEvents"]) == 3
    assert all({"ph", "ts", "dur", "pid"} <= set(e) and e["ph"] == "X" for e in doc["traceEvents"])


def test_chrome_round_trip(small):
    cal, progs, cost, _ = small
    rep = emulate(cal, [0], progs, cost)
    back = parse_chrome_trace(export_chrome_trace(rep))
    for nid, (s, d) in rep.node_times.items():
        ts, du = back[nid]
        assert abs(ts - s / 1000) <= 1 and abs(du - d / 1000) <= 1


# -- memory -------------------------------------------------------------------

def test_memory_baseline_and_peak_closed_form():
    spec = ParallelismSpec(pp=4, ga=8)
    cost = CostModel(transient_comm_buffers=False)
    cal, progs, cost, _ = pipeline(spec, cost)
    rep = emulate(cal, range(4), progs, cost)
    for s in range(4):
        assert rep.timelines[s][0] == (0, cost.static_bytes)
        assert rep.peaks[s] == cost.static_bytes + min(4 - s, 8) * cost.act_bytes


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(1.0, 3.0), min_size=2, max_size=5, unique=True))
def test_expert_memory_monotone_in_br_max(levels):
    spec = ParallelismSpec(pp=1, dp=2, ep=2, ga=2)
    cost = CostModel()
    groups = build_groups(spec)
    peaks = []
    for top in sorted(levels):
        br = np.ones((4, 2))
        br[:, 0] = top
        progs = build_programs(spec, cost, br, groups)
        bare, _, _ = run_collection(progs, 2, groups=groups)
        timed, _ = fill_all(bare, plan_slices(2, 2), Simulated(progs, cost))
        peaks.append(emulate(calibrate(timed), [0], progs, cost).peaks[0])
    assert peaks == sorted(peaks)


def test_preset_sandbox_block_of_64():
    spec, cost = preset("S.A", 64)
    cal, progs, cost, _ = pipeline(spec, cost)
    full = simulate_full(progs, cost)
    rep = emulate(cal, range(8), progs, cost)
    assert rep.iteration_time == full.makespan
    assert all(rep.peaks[r] == full.peaks[r] for r in range(8))
