import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridemu.coordinator import (Coordinator, Deadlock, InjectionRule, RuleKind, ShapeMismatch,
                                   Status, StoreOverflow, apply_injection, cpu_execute_collective,
                                   run_collection)
from hybridemu.graph import (CommDescriptor, CommGroup, CommKind, ReduceOp, isomorphic,
                             serialize_graph, validate)
from hybridemu.workload import (Communicate, Compute, ParallelismSpec, RankProgram, build_groups,
                                build_programs)

SUM = ReduceOp.SUM


def ar(group, label="ar", nbytes=8):
    return Communicate(CommDescriptor(CommKind.ALL_REDUCE, group, nbytes, SUM), label)


def simple_programs(assign):
    """assign: rank -> group id; each rank computes, all-reduces, computes."""
    return {r: RankProgram(r, [Compute("fwd", 0), ar(g), Compute("bwd", 0)]) for r, g in assign.items()}


def spec_programs(spec):
    groups = build_groups(spec)
    return build_programs(spec, groups=groups), groups


# -- run_collection ---------------------------------------------------------

def test_single_rank_single_slot():
    progs, groups = spec_programs(ParallelismSpec())
    g, stats, _ = run_collection(progs, 1, groups=groups)
    assert len(g) == len(progs[0].steps)
    assert stats.swaps == 0
    assert g.state() == "bare"


def test_all_resident_never_swaps():
    progs, groups = spec_programs(ParallelismSpec(tp=2, pp=2, dp=2, ga=2))
    _, stats, _ = run_collection(progs, 8, groups=groups)
    assert stats.swaps == 0 and stats.cpu_collectives == 0
    assert stats.direct_collectives > 0


def test_one_slot_isomorphic_to_all_slots():
    progs, groups = spec_programs(ParallelismSpec(tp=2, pp=2, dp=2, ga=2))
    ref, _, _ = run_collection(progs, 8, groups=groups)
    one, stats, _ = run_collection(progs, 1, groups=groups)
    assert stats.swaps > 0
    assert isomorphic(ref, one)
    assert validate(one) == []


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([(1, 2, 2, 0, 1, 2), (2, 2, 1, 0, 2, 2), (1, 2, 2, 2, 2, 4),
                        (2, 1, 2, 0, 4, 1), (1, 4, 1, 0, 1, 4)]),
       st.integers(1, 8), st.integers(0, 3))
def test_isomorphic_for_any_slot_count(dims, slots, seed):
    tp, pp, dp, vpp, ep, ga = dims
    spec = ParallelismSpec(tp=tp, pp=pp, dp=dp, vpp=vpp, ep=ep, ga=ga)
    progs, groups = spec_programs(spec)
    slots = min(slots, spec.world)
    ref, _, _ = run_collection(progs, spec.world, groups=groups, seed=seed)
    g, stats, _ = run_collection(progs, slots, groups=groups, seed=seed)
    assert isomorphic(ref, g)
    assert stats.swaps <= stats.occurrences * spec.world


def test_deterministic_bytes():
    progs, groups = spec_programs(ParallelismSpec(pp=2, dp=2, ep=2, ga=2))
    a = serialize_graph(run_collection(progs, 2, groups=groups, seed=5)[0])
    b = serialize_graph(run_collection(progs, 2, groups=groups, seed=5)[0])
    assert a == b


def test_full_injection_means_no_swaps():
    progs, groups = spec_programs(ParallelismSpec(tp=2, pp=2, dp=2, ep=2, ga=2))
    rules = [InjectionRule(RuleKind.CONSTANT_STATUS, "*")]
    ref, _, _ = run_collection(progs, 8, groups=groups)
    g, stats, _ = run_collection(progs, 1, rules, groups=groups)
    assert stats.swaps == 0 and stats.cpu_collectives == 0
    assert isomorphic(ref, g)


def test_swap_cost_accounting():
    progs, groups = spec_programs(ParallelismSpec(pp=2, ga=2))
    _, stats, _ = run_collection(progs, 1, groups=groups)
    c = Coordinator(progs, 1).cost
    assert stats.swap_cost_ns == stats.swaps * c.swap_out_ns + stats.swap_ins * c.swap_in_ns


# -- Fig. 4 scheduling scenario -----------------------------------------------

X = (0, 1, 2, 3, 6, 8, 10, 11)
Y = (4, 5, 7, 9)


def fig4():
    groups = {0: CommGroup(0, "X", X), 1: CommGroup(1, "Y", Y)}
    progs = simple_programs({r: 0 if r in X else 1 for r in range(12)})
    return Coordinator(progs, 4, groups=groups)


def test_fig4_unblockers_scheduled_first():
    c = fig4()
    g, stats, _ = c.run()
    acts = [r for kind, r in c.log if kind == "activate"]
    assert acts[:4] == [0, 1, 2, 3]
    # before X completes, only the missing X participants are brought in
    done = c.log.index(("ExecuteCPU", (0, 0)))
    early = [r for kind, r in c.log[:done] if kind == "activate"][4:]
    assert sorted(early) == [6, 8, 10, 11]
    assert len(g) == 36


def test_fig4_first_switch_is_the_unblocker():
    c = fig4()
    for r in range(4):
        c._activate(r, r)
    c._advance(0)
    assert c.state[0].status == Status.FROZEN
    assert c.resident[0] == 8
    for r in (1, 2, 3, 6, 10, 11):
        assert c.state[r].pending_ops == 1
    assert c.state[4].pending_ops == 0


# -- select_switch ------------------------------------------------------------

def switch_fixture(pending):
    progs = simple_programs({r: 0 for r in range(len(pending) + 1)})
    c = Coordinator(progs, 1)
    c._activate(0, 0)
    for r, p in enumerate(pending, start=1):
        c.state[r].pending_ops = p
    return c


def test_select_switch_prefers_most_pending():
    c = switch_fixture([3, 5])
    assert c.select_switch(0) == 2


def test_select_switch_tie_lowest_rank():
    c = switch_fixture([0, 4, 0, 4])
    assert c.select_switch(0) == 2


def test_select_switch_none_when_not_ready():
    c = switch_fixture([3, 5])
    c._advance(0)  # rank 0 arrives at the collective; not complete yet
    occ = next(iter(c.occ))
    for r in (1, 2):
        c.state[r].head_op = occ
    assert c.select_switch(0) is None


def test_select_switch_respects_affinity():
    progs = simple_programs({r: 0 for r in range(4)})
    c = Coordinator(progs, 2)
    c._activate(0, 0)
    c.state[1].pending_ops = 9
    c.state[2].pending_ops = 1
    assert c.select_switch(0) == 2


# -- handle_collective ----------------------------------------------------------

def test_two_party_direct():
    c = Coordinator(simple_programs({0: 0, 1: 0}), 2)
    g, stats, _ = c.run()
    assert stats.direct_collectives == 1 and stats.swaps == 0
    assert ("ExecuteDirect", (0, 0)) in c.log


def test_last_arrival_makes_frozen_ranks_ready():
    seen = {}

    def watch(coord, what):
        if what == "collective" and coord.occ[(0, 0)].complete and not seen:
            seen.update({r: (coord.state[r].status, coord.state[r].head_ready(coord.occ))
                         for r in range(3)})

    c = Coordinator(simple_programs({r: 0 for r in range(4)}), 1, on_event=watch)
    c.run()
    assert seen == {r: (Status.FROZEN, True) for r in range(3)}


def test_pending_ops_invariant():
    spec = ParallelismSpec(tp=2, pp=2, dp=2, ep=2, ga=2)
    progs, groups = spec_programs(spec)
    checks = [0]

    def watch(coord, _):
        for r, st_ in coord.state.items():
            want = sum(o.staged and r in o.remaining() for o in coord.occ.values())
            assert st_.pending_ops == want >= 0
        checks[0] += 1

    Coordinator(progs, 3, groups=groups, on_event=watch).run()
    assert checks[0] > 50


def test_deadlock_detected():
    # both ranks are in both groups but issue them in opposite order
    progs = {0: RankProgram(0, [ar(0), ar(1)]), 1: RankProgram(1, [ar(1), ar(0)])}
    with pytest.raises(Deadlock):
        run_collection(progs, 2)


def test_store_overflow_and_spill():
    progs = simple_programs({r: 0 for r in range(4)})
    with pytest.raises(StoreOverflow):
        run_collection(progs, 1, store_capacity=8)
    _, stats, _ = run_collection(progs, 1, store_capacity=8, spill=True)
    assert stats.spilled_bytes > 0


def test_record_outputs_match_cpu_execution():
    progs, groups = spec_programs(ParallelismSpec(tp=2, dp=2, ga=1))
    _, _, rec = run_collection(progs, 2, groups=groups)
    for key, inputs in rec.inputs.items():
        if set(inputs) == set(rec.participants[key]):
            want = cpu_execute_collective(rec.descriptors[key], inputs)
            for r, out in want.items():
                assert np.array_equal(rec.outputs[key][r], out)


# -- cpu_execute_collective ------------------------------------------------------

def desc(kind, op=None, n=4):
    return CommDescriptor(kind, 0, 8, op)


def test_cpu_allreduce_sum():
    out = cpu_execute_collective(desc(CommKind.ALL_REDUCE, SUM), {r: np.array([r + 1]) for r in range(4)})
    assert all(v.tolist() == [10] for v in out.values())


def test_cpu_broadcast():
    out = cpu_execute_collective(desc(CommKind.BROADCAST), {0: np.array([7, 7]), 1: np.array([0, 0])})
    assert out[1].tolist() == [7, 7]


def test_cpu_reduce_scatter_gather_alltoall():
    p = {0: np.array([1, 2]), 1: np.array([3, 4])}
    rs = cpu_execute_collective(desc(CommKind.REDUCE_SCATTER, SUM), p)
    assert rs[0].tolist() == [4] and rs[1].tolist() == [6]
    ag = cpu_execute_collective(desc(CommKind.ALL_GATHER), p)
    assert ag[1].tolist() == [1, 2, 3, 4]
    a2a = cpu_execute_collective(desc(CommKind.ALL_TO_ALL), p)
    assert a2a[0].tolist() == [1, 3] and a2a[1].tolist() == [2, 4]
    mx = cpu_execute_collective(desc(CommKind.ALL_REDUCE, ReduceOp.MAX), p)
    assert mx[0].tolist() == [3, 4]


def test_cpu_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        cpu_execute_collective(desc(CommKind.ALL_REDUCE, SUM), {0: np.zeros(2), 1: np.zeros(3)})


# -- injection ------------------------------------------------------------

def test_injection_rules():
    status = CommDescriptor(CommKind.BROADCAST, 0, 8)
    rules = [InjectionRule.parse("ConstantStatus label=dataloader.status"),
             InjectionRule.parse("InRangeIndex label=batch.* kind=Broadcast vocab=1000 length=64"),
             InjectionRule.parse("ZeroSplits kind=AllToAll")]
    assert apply_injection(rules, status, "dataloader.status").tolist() == [1]
    idx = apply_injection(rules, status, "batch.indices")
    assert len(idx) == 64 and idx.min() >= 0 and idx.max() < 1000
    splits = apply_injection(rules, CommDescriptor(CommKind.ALL_TO_ALL, 0, 8), "moe.dispatch", 4)
    assert splits.tolist() == [0, 0, 0, 0]
    assert apply_injection(rules, CommDescriptor(CommKind.ALL_REDUCE, 0, 8, SUM), "tp.fwd") is None


def test_first_matching_rule_wins():
    d = CommDescriptor(CommKind.BROADCAST, 0, 8)
    rules = [InjectionRule(RuleKind.ZERO_SPLITS, "x"), InjectionRule(RuleKind.CONSTANT_STATUS, "*"),
             InjectionRule(RuleKind.ZERO_SPLITS, "*")]
    assert apply_injection(rules, d, "y").tolist() == [1]


def test_bad_rule_text():
    with pytest.raises(ValueError):
        InjectionRule.parse("ConstantStatus colour=red")
    with pytest.raises(ValueError):
        InjectionRule.parse("Teleport")
