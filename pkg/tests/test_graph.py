from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridemu.calibration import calibrate, iteration_time
from hybridemu.coordinator import run_collection
from hybridemu.graph import (CommDescriptor, CommEvent, CommGroup, CommKind, ComputeSpan,
                             CyclicGraph, DanglingEdge, ExecutionGraph, GraphBuilder, GraphNode,
                             InvalidGraph, MalformedRecord, MissingDuration, ReduceOp, RemapConflict,
                             UnknownVersion, critical_path, expand_dp, isomorphic, occurrence_keys,
                             parse_graph, serialize_graph, topo_order, validate)
from hybridemu.workload import ParallelismSpec, build_groups, build_programs

from oracles import longest_path_enumeration, random_graph

FIXTURES = Path(__file__).parent / "fixtures"


def chain(durations):
    b = GraphBuilder(1)
    for i, _ in enumerate(durations):
        b.add(0, ComputeSpan(f"c{i}"))
    g = b.build()
    for nid, d in zip(sorted(g.nodes), durations):
        g.nodes[nid].duration_ns = d
    return g


def test_descriptor_reduce_op_rule():
    CommDescriptor(CommKind.ALL_REDUCE, 0, 8, ReduceOp.SUM)
    with pytest.raises(ValueError):
        CommDescriptor(CommKind.ALL_REDUCE, 0, 8)
    with pytest.raises(ValueError):
        CommDescriptor(CommKind.ALL_GATHER, 0, 8, ReduceOp.MAX)
    with pytest.raises(ValueError):
        CommDescriptor(CommKind.BARRIER, 0, -1)


def test_send_recv_are_compatible():
    s = CommDescriptor(CommKind.SEND, 3, 64)
    r = CommDescriptor(CommKind.RECV, 3, 64)
    assert s.compatible(r) and r.compatible(s)
    assert not s.compatible(CommDescriptor(CommKind.RECV, 4, 64))
    assert not s.compatible(CommDescriptor(CommKind.ALL_GATHER, 3, 64))


def test_empty_graph_parses():
    g = parse_graph(b"prismtrace v1 world=4\n")
    assert len(g) == 0 and g.world_size == 4


def test_unknown_version():
    with pytest.raises(UnknownVersion):
        parse_graph(b"prismtrace v9 world=1\n")


def test_dangling_edge():
    data = b"prismtrace v1 world=1\nN 0 0 C fwd 0\nE 0 7 D\n"
    with pytest.raises(DanglingEdge) as exc:
        parse_graph(data)
    assert "7" in str(exc.value)


@pytest.mark.parametrize("line", ["N x 0 C fwd 0", "N 0 0 Q fwd", "N 0 0 C fwd 0 color=red",
                                  "E 0", "Z 1 2", "N 0 0 M AllReduce 0 8 - Ring ar"])
def test_malformed_record_reports_line(line):
    data = f"prismtrace v1 world=1\n{line}\n".encode()
    with pytest.raises(MalformedRecord) as exc:
        parse_graph(data)
    assert exc.value.line == 2


def test_optional_fields_omitted():
    g = chain([3])
    text = serialize_graph(g.bare()).decode()
    assert "dur=" not in text and "start=" not in text
    assert "dur=3" in serialize_graph(g).decode()


def test_validate_chain_and_cycle():
    g = chain([1, 2, 3])
    assert validate(g) == []
    g.directional.append((2, 0))
    rules = {v.rule for v in validate(g)}
    assert "CycleDetected" in rules
    with pytest.raises(CyclicGraph):
        topo_order(g)


def test_validate_sync_descriptor_mismatch():
    groups = {0: CommGroup(0, "W", (0, 1))}
    b = GraphBuilder(2, groups)
    b.add(0, CommEvent(CommDescriptor(CommKind.ALL_REDUCE, 0, 8, ReduceOp.SUM)), occurrence=(0, 0))
    b.add(1, CommEvent(CommDescriptor(CommKind.ALL_REDUCE, 0, 16, ReduceOp.SUM)), occurrence=(0, 0))
    g = b.build()
    assert [v.rule for v in validate(g)] == ["SyncDescriptorMismatch"]
    with pytest.raises(InvalidGraph):
        parse_graph(serialize_graph(g))


def test_validate_calibrated_invariants():
    g = chain([5, 5])
    g.nodes[0].start_ns, g.nodes[1].start_ns = 0, 3
    assert "DependencyViolated" in {v.rule for v in validate(g)}
    g.nodes[1].start_ns = None
    assert "PartialTiming" in {v.rule for v in validate(g)}


def test_topo_order_chain_and_diamond():
    assert topo_order(chain([1, 1, 1])) == [0, 1, 2]
    g = ExecutionGraph(1, nodes={i: GraphNode(i, 0, ComputeSpan("x")) for i in range(4)},
                       rank_order={0: [0, 1, 2, 3]},
                       directional=[(0, 2), (0, 1), (1, 3), (2, 3)])
    assert topo_order(g) == [0, 1, 2, 3]


@st.composite
def random_dags(draw):
    n = draw(st.integers(1, 200))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n))
    perm = draw(st.permutations(range(n)))
    # orient every edge along the hidden permutation, so the result is acyclic
    rank_of = {v: i for i, v in enumerate(perm)}
    dedges = sorted({(a, b) if rank_of[a] < rank_of[b] else (b, a) for a, b in edges if a != b})
    nodes = {i: GraphNode(i, 0, ComputeSpan("x")) for i in range(n)}
    return ExecutionGraph(1, nodes=nodes, rank_order={0: list(range(n))}, directional=dedges)


@settings(max_examples=60, deadline=None)
@given(random_dags())
def test_topo_order_respects_every_edge(g):
    order = topo_order(g)
    pos = {n: i for i, n in enumerate(order)}
    assert sorted(order) == sorted(g.nodes)
    assert all(pos[e.src] < pos[e.dst] for e in g.edges())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_round_trip_random_graphs(seed, timed):
    g = random_graph(seed, timed=timed)
    data = serialize_graph(g)
    h = parse_graph(data)
    assert serialize_graph(h) == data
    assert isomorphic(g, h)
    assert serialize_graph(g) == data  # deterministic


def test_round_trip_fixture_bytes():
    data = (FIXTURES / "demo_1f1b.ptg").read_bytes()
    assert serialize_graph(parse_graph(data)) == data


def test_validate_clean_implies_topo_order():
    for seed in range(30):
        g = random_graph(seed)
        assert validate(g) == []
        topo_order(g)


def test_critical_path_trivial():
    assert critical_path(chain([5]))[1] == 5
    g = ExecutionGraph(1, nodes={0: GraphNode(0, 0, ComputeSpan("a"), 3),
                                 1: GraphNode(1, 1, ComputeSpan("b"), 7)},
                       rank_order={0: [0], 1: [1]})
    path, length = critical_path(g)
    assert length == 7 and path == [1]
    with pytest.raises(MissingDuration):
        critical_path(chain([1]).bare())


def test_critical_path_matches_enumeration():
    for seed in range(40):
        g = random_graph(seed, ranks=3, steps=4)
        path, length = critical_path(g)
        assert length == longest_path_enumeration(g)
        assert sum(g.nodes[n].duration_ns for n in path) == length


def test_critical_path_demo_fixture():
    g = parse_graph((FIXTURES / "demo_1f1b.ptg").read_bytes())
    assert len(g) <= 22
    length = critical_path(g)[1]
    assert length == longest_path_enumeration(g)
    assert length == iteration_time(calibrate(g))


def test_critical_path_equals_calibrated_makespan_random():
    for seed in range(40):
        g = random_graph(seed)
        assert critical_path(g)[1] == iteration_time(calibrate(g))


def test_occurrence_keys_sequence():
    g = random_graph(3)
    keys = occurrence_keys(g)
    for ms in g.sync_groups.values():
        assert len({keys[m] for m in ms}) == 1


def _replica_setup(dp):
    spec = ParallelismSpec(tp=2, pp=2, dp=dp, ep=2, ga=2)
    groups = build_groups(spec)
    return spec, groups


def test_expand_dp_matches_collected_graph():
    spec1, groups1 = _replica_setup(1)
    t, _, _ = run_collection(build_programs(spec1, groups=groups1), 4, groups=groups1)
    spec4, groups4 = _replica_setup(4)
    full, _, _ = run_collection(build_programs(spec4, groups=groups4), 16, groups=groups4)
    per = spec1.tp * spec1.pp

    def remap(gid, k):
        tgrp = groups1[gid]
        want = {m + k * per for m in tgrp.members}
        for g4 in groups4.values():
            if g4.role == tgrp.role and want <= set(g4.members):
                return g4.id
        raise AssertionError(gid)

    # DP groups in the template are singletons; map them onto the real DP groups
    g = expand_dp(t, 4, per, remap, groups4)
    assert len(g) == 4 * len(t)
    assert isomorphic(g, full)
    assert validate(g) == []


def test_expand_dp_identity_and_conflict():
    spec1, groups1 = _replica_setup(1)
    t, _, _ = run_collection(build_programs(spec1, groups=groups1), 4, groups=groups1)
    same = expand_dp(t, 1, 4, lambda gid, k: gid, groups1)
    assert isomorphic(same, t)
    with pytest.raises(RemapConflict):
        expand_dp(t, 2, 4, lambda gid, k: gid, groups1)
