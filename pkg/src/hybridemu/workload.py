"""Synthetic training workloads: parallel layouts, communication groups,
cost models and per-rank step programs following the 1F1B pipeline schedule.

Ranks are enumerated TP-fastest, then PP, then DP::

    rank = t + tp * (s + pp * d)

Per-rank programs are built in two passes. First an idealised timeline of
the pipeline's compute units is simulated; then every step (compute,
point-to-point transfer, collective) is given a global ordering key derived
from that timeline and each rank's steps are sorted by key. Because every
member of a collective sees the same key, the blocking rendezvous order is
globally consistent and the programs cannot deadlock.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmulationError
from .graph import Algorithm, CommDescriptor, CommGroup, CommKind, ReduceOp

MS = 1_000_000
MiB = 1 << 20
GiB = 1 << 30


class InvalidSpec(EmulationError):
    pass


class GaTooSmall(InvalidSpec):
    pass


class UnknownPreset(EmulationError):
    pass


@dataclass(frozen=True)
class ParallelismSpec:
    tp: int = 1
    pp: int = 1
    dp: int = 1
    vpp: int = 0
    ep: int = 1
    ga: int = 1

    @property
    def world(self) -> int:
        return self.tp * self.pp * self.dp

    @property
    def chunks(self) -> int:
        """Model chunks per pipeline stage (1 when interleaving is off)."""
        return max(self.vpp, 1)

    @property
    def ep_effective(self) -> int:
        """Expert-parallel width actually realisable inside dp*tp."""
        return math.gcd(self.ep, self.dp * self.tp)

    @property
    def moe(self) -> bool:
        return self.ep > 1

    def rank_of(self, t: int, s: int, d: int) -> int:
        return t + self.tp * (s + self.pp * d)

    def coords(self, rank: int) -> tuple[int, int, int]:
        t = rank % self.tp
        s = (rank // self.tp) % self.pp
        d = rank // (self.tp * self.pp)
        return t, s, d

    def check(self) -> None:
        for name in ("tp", "pp", "dp", "ep", "ga"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vpp < 0:
            raise InvalidSpec("vpp must be >= 0")
        if self.vpp > 1:
            if self.ga < self.vpp * self.pp:
                raise GaTooSmall(f"ga={self.ga} < vpp*pp={self.vpp * self.pp}: not enough "
                                 "microbatches to fill the interleaved pipeline")
            if self.ga % self.pp:
                raise InvalidSpec(f"interleaved schedule needs ga divisible by pp ({self.ga} % {self.pp})")

    def tag(self) -> str:
        return f"tp{self.tp}-pp{self.pp}-vpp{self.vpp}-ep{self.ep}-dp{self.dp}-ga{self.ga}"


@dataclass
class CostModel:
    compute_ns: dict[str, int] = field(default_factory=lambda: {
        "fwd": 10 * MS, "bwd": 20 * MS, "fwd.expert": 5 * MS, "bwd.expert": 10 * MS,
        "optim": 5 * MS,
    })
    # (label, microbatch) -> ns, overrides compute_ns for one microbatch
    microbatch_ns: dict[tuple[str, int], int] = field(default_factory=dict)
    p2p_ns: int = 1 * MS
    coll_latency_ns: int = 500_000
    bandwidth_Bps: int = 25_000_000_000
    act_bytes: int = 512 * MiB
    expert_act_bytes: int = 256 * MiB
    static_bytes: int = 16 * GiB
    p2p_bytes: int = 64 * MiB
    tp_bytes: int = 128 * MiB
    a2a_bytes: int = 256 * MiB
    dp_bytes: int = 2 * GiB
    control_bytes: int = 64
    swap_out_ns: int = 2_000 * MS
    swap_in_ns: int = 2_000 * MS
    transient_comm_buffers: bool = True
    dp_algorithm: Algorithm = Algorithm.RING
    control_broadcasts: bool = True
    moe_experts: int = 128
    moe_top_k: int = 8

    def __post_init__(self):
        for k, v in self.compute_ns.items():
            if v < 0:
                raise InvalidSpec(f"negative compute cost for {k}")
        for name in ("p2p_ns", "coll_latency_ns", "act_bytes", "expert_act_bytes", "static_bytes",
                     "p2p_bytes", "tp_bytes", "a2a_bytes", "dp_bytes", "swap_out_ns", "swap_in_ns"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        if self.bandwidth_Bps <= 0:
            raise InvalidSpec("bandwidth must be positive")

    def compute_duration(self, label: str, microbatch: int | None, scale: float = 1.0) -> int:
        base_label = label.split(":", 1)[0]
        if microbatch is not None and (base_label, microbatch) in self.microbatch_ns:
            base = self.microbatch_ns[(base_label, microbatch)]
        else:
            base = self.compute_ns.get(base_label, 0)
        return int(round(base * scale))

    def comm_duration(self, d: CommDescriptor) -> int:
        if d.kind in (CommKind.SEND, CommKind.RECV):
            return self.p2p_ns
        if d.kind == CommKind.BARRIER:
            return self.coll_latency_ns
        return self.coll_latency_ns + (d.bytes * 1_000_000_000) // self.bandwidth_Bps

    def step_duration(self, step: Step) -> int:
        if isinstance(step, Compute):
            return self.compute_duration(step.label, step.microbatch, step.scale)
        return self.comm_duration(step.descriptor)


@dataclass(frozen=True, slots=True)
class Compute:
    label: str
    microbatch: int | None = None
    scale: float = 1.0
    mem_delta: int = 0  # bytes allocated (+) or freed (-) by this step


@dataclass(frozen=True, slots=True)
class Communicate:
    descriptor: CommDescriptor
    label: str = "-"


Step = Compute | Communicate


@dataclass
class RankProgram:
    rank: int
    steps: list[Step]

    def compute_count(self, prefix: str = "") -> int:
        return sum(isinstance(s, Compute) and s.label.startswith(prefix) for s in self.steps)


class CommGroups(dict):
    """gid -> CommGroup, with per-rank lookups by role."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self._by_rank: dict[tuple[str, int], list[int]] = defaultdict(list)
        for gid, grp in self.items():
            for m in grp.members:
                self._by_rank[(grp.role, m)].append(gid)

    def add(self, role: str, members) -> int:
        gid = len(self)
        self[gid] = CommGroup(gid, role, tuple(members))
        for m in members:
            self._by_rank[(role, m)].append(gid)
        return gid

    def of(self, rank: int, role: str) -> list[int]:
        return self._by_rank.get((role, rank), [])

    def one(self, rank: int, role: str) -> int:
        gids = self.of(rank, role)
        if len(gids) != 1:
            raise KeyError(f"rank {rank} has {len(gids)} {role} groups")
        return gids[0]

    def role_count(self, role: str) -> int:
        return sum(g.role == role for g in self.values())


def build_groups(spec: ParallelismSpec) -> CommGroups:
    """TP groups, PP chains, DP groups, EP groups, then adjacent-stage
    point-to-point pairs (role P2P), in that id order."""
    spec.check()
    tp, pp, dp = spec.tp, spec.pp, spec.dp
    groups = CommGroups()
    for d in range(dp):
        for s in range(pp):
            groups.add("TP", [spec.rank_of(t, s, d) for t in range(tp)])
    for d in range(dp):
        for t in range(tp):
            groups.add("PP", [spec.rank_of(t, s, d) for s in range(pp)])
    for s in range(pp):
        for t in range(tp):
            groups.add("DP", [spec.rank_of(t, s, d) for d in range(dp)])
    ep = spec.ep_effective
    for s in range(pp):
        flat = [spec.rank_of(f % tp, s, f // tp) for f in range(dp * tp)]
        for b in range(0, len(flat), ep):
            groups.add("EP", flat[b:b + ep])
    for d in range(dp):
        for t in range(tp):
            pairs = [(s, s + 1) for s in range(pp - 1)]
            if spec.chunks > 1 and pp > 2:
                pairs.append((pp - 1, 0))
            for a, b in pairs:
                groups.add("P2P", sorted((spec.rank_of(t, a, d), spec.rank_of(t, b, d))))
    return groups


# -- pipeline schedule ------------------------------------------------------

def stage_schedule(spec: ParallelismSpec, stage: int) -> list[tuple[str, int, int]]:
    """Compute order of one pipeline stage as (F|B, microbatch, chunk).

    Non-interleaved: ``pp - stage - 1`` warmup forwards, one-forward-one-
    backward steady state, backward cooldown. Interleaved (vpp > 1) uses the
    usual grouping of ``pp`` microbatches per model chunk.
    """
    p, m, v = spec.pp, spec.ga, spec.chunks
    total = m * v
    if v == 1:
        warmup = min(p - stage - 1, m)

        def fwd(k):
            return k, 0

        def bwd(k):
            return k, 0
    else:
        warmup = min((p - stage - 1) * 2 + (v - 1) * p, total)

        def fwd(k):
            return (k // (p * v)) * p + k % p, (k // p) % v

        def bwd(k):
            return (k // (p * v)) * p + k % p, v - 1 - (k // p) % v
    order = [("F", *fwd(k)) for k in range(warmup)]
    for i in range(total - warmup):
        order.append(("F", *fwd(warmup + i)))
        order.append(("B", *bwd(i)))
    order += [("B", *bwd(k)) for k in range(total - warmup, total)]
    return order


def ideal_timeline(spec: ParallelismSpec, f_cost: int = 10, b_cost: int = 20):
    """ASAP times of every compute unit under unit costs.

    Returns {(F|B, mb, vstage): (start, end)} where vstage = chunk*pp + stage."""
    p, v = spec.pp, spec.chunks
    V = p * v
    orders = [stage_schedule(spec, s) for s in range(p)]
    pos = [0] * p
    free = [0] * p
    done: dict[tuple[str, int, int], tuple[int, int]] = {}
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for s in range(p):
            while pos[s] < len(orders[s]):
                kind, mb, c = orders[s][pos[s]]
                vs = c * p + s
                if kind == "F":
                    deps = [("F", mb, vs - 1)] if vs > 0 else []
                else:
                    deps = [("B", mb, vs + 1)] if vs < V - 1 else [("F", mb, vs)]
                    deps.append(("F", mb, vs))
                if any(dep not in done for dep in deps):
                    break
                start = max([free[s]] + [done[dep][1] for dep in deps])
                end = start + (f_cost if kind == "F" else b_cost)
                done[(kind, mb, vs)] = (start, end)
                free[s] = end
                pos[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise InvalidSpec("pipeline schedule cannot make progress")
    return done


def _stage_templates(spec: ParallelismSpec, control: bool = True):
    """Per stage: sorted list of (key, template step). Group references are
    role placeholders resolved per rank later."""
    p, v = spec.pp, spec.chunks
    V = p * v
    times = ideal_timeline(spec)
    moe, a2a = spec.moe, spec.ep_effective > 1
    tp_on = spec.tp > 1
    per_stage: dict[int, list] = defaultdict(list)

    def lbl(base, c):
        return base if v == 1 else f"{base}:c{c}"

    for (kind, mb, vs), (t0, t1) in times.items():
        s, c = vs % p, vs // p
        items = per_stage[s]
        if kind == "F":
            if s == 0 and c == 0 and tp_on and control:
                items.append(((t0, 0, 5, c, mb), ("bcast", "batch.indices")))
            sub = [("compute", lbl("fwd", c), mb)]
            if tp_on:
                sub.append(("tp", "tp.fwd"))
            if moe:
                if a2a:
                    sub.append(("a2a", "moe.dispatch"))
                sub.append(("expert", lbl("fwd.expert", c), mb))
                if a2a:
                    sub.append(("a2a", "moe.combine"))
        else:
            sub = []
            if moe:
                if a2a:
                    sub.append(("a2a", "moe.combine.bwd"))
                sub.append(("expert", lbl("bwd.expert", c), mb))
                if a2a:
                    sub.append(("a2a", "moe.dispatch.bwd"))
            sub.append(("compute", lbl("bwd", c), mb))
            if tp_on:
                sub.append(("tp", "tp.bwd"))
        for i, item in enumerate(sub):
            items.append(((t0, 1, i, 0, 0), item))
        # activation / gradient transfer to the neighbouring virtual stage
        nxt = vs + 1 if kind == "F" else vs - 1
        if 0 <= nxt < V and nxt % p != s:
            d = 0 if kind == "F" else 1
            key = (t1, 0, d, vs, mb)
            direction = "fwd" if kind == "F" else "bwd"
            per_stage[s].append((key, ("send", nxt % p, f"pp.{direction}.send")))
            per_stage[nxt % p].append((key, ("recv", s, f"pp.{direction}.recv")))
    for s in range(p):
        items = per_stage[s]
        t_end = max(t1 for (k, mb, vs), (t0, t1) in times.items() if vs % p == s)
        if tp_on and control:
            items.append(((-1, 0, 0, 0, 0), ("bcast", "dataloader.status")))
        items.append(((t_end, 2, 0, 0, 0), ("dp_rs", "dp.grad")))
        items.append(((t_end, 2, 1, 0, 0), ("compute", "optim", None)))
        items.append(((t_end, 2, 2, 0, 0), ("dp_ag", "dp.param")))
        items.sort(key=lambda kv: kv[0])
    return per_stage


def build_programs(spec: ParallelismSpec, cost: CostModel | None = None,
                   br_schedule: np.ndarray | None = None,
                   groups: CommGroups | None = None) -> dict[int, RankProgram]:
    """One program per rank.

    ``br_schedule`` (gating events x EP ranks) scales expert compute time
    and expert activation memory; event e of a rank uses row e mod rows.
    """
    spec.check()
    cost = cost or CostModel()
    groups = groups or build_groups(spec)
    templates = _stage_templates(spec, cost.control_broadcasts)
    Sum = ReduceOp.SUM
    programs: dict[int, RankProgram] = {}
    for rank in range(spec.world):
        t, s, d = spec.coords(rank)
        tp_g = groups.one(rank, "TP")
        dp_g = groups.one(rank, "DP")
        ep_g = groups.one(rank, "EP")
        ep_pos = groups[ep_g].members.index(rank)
        steps: list[Step] = []
        gate = 0
        expert_mem: dict[tuple[int, str], int] = {}
        for _, item in templates[s]:
            tag = item[0]
            if tag == "compute":
                label, mb = item[1], item[2]
                base = label.split(":", 1)[0]
                delta = cost.act_bytes if base == "fwd" else -cost.act_bytes if base == "bwd" else 0
                steps.append(Compute(label, mb, 1.0, delta))
            elif tag == "expert":
                label, mb = item[1], item[2]
                chunk = label.split(":", 1)[1] if ":" in label else ""
                if label.startswith("fwd"):
                    br = 1.0
                    if br_schedule is not None:
                        br = float(br_schedule[gate % br_schedule.shape[0], ep_pos % br_schedule.shape[1]])
                    gate += 1
                    mem = int(round(cost.expert_act_bytes * br))
                    expert_mem[(mb, chunk)] = (mem, br)
                    steps.append(Compute(label, mb, br, mem))
                else:
                    mem, br = expert_mem.pop((mb, chunk))
                    steps.append(Compute(label, mb, br, -mem))
            elif tag == "tp":
                steps.append(Communicate(CommDescriptor(CommKind.ALL_REDUCE, tp_g, cost.tp_bytes, Sum), item[1]))
            elif tag == "a2a":
                steps.append(Communicate(CommDescriptor(CommKind.ALL_TO_ALL, ep_g, cost.a2a_bytes), item[1]))
            elif tag in ("send", "recv"):
                peer = spec.rank_of(t, item[1], d)
                pair = _pair_group(groups, rank, peer)
                kind = CommKind.SEND if tag == "send" else CommKind.RECV
                steps.append(Communicate(CommDescriptor(kind, pair, cost.p2p_bytes), item[2]))
            elif tag == "bcast":
                steps.append(Communicate(CommDescriptor(CommKind.BROADCAST, tp_g, cost.control_bytes), item[1]))
            elif tag == "dp_rs":
                steps.append(Communicate(CommDescriptor(CommKind.REDUCE_SCATTER, dp_g, cost.dp_bytes, Sum,
                                                        cost.dp_algorithm), item[1]))
            elif tag == "dp_ag":
                steps.append(Communicate(CommDescriptor(CommKind.ALL_GATHER, dp_g, cost.dp_bytes, None,
                                                        cost.dp_algorithm), item[1]))
            else:  # pragma: no cover
                raise AssertionError(tag)
        programs[rank] = RankProgram(rank, steps)
    return programs


def _pair_group(groups: CommGroups, a: int, b: int) -> int:
    want = tuple(sorted((a, b)))
    for gid in groups.of(a, "P2P"):
        if groups[gid].members == want:
            return gid
    raise InvalidSpec(f"no point-to-point group for ranks {a},{b}")


def peak_activation_closed_form(spec: ParallelismSpec, stage: int, cost: CostModel) -> int:
    """Live activations at the 1F1B steady-state peak (non-interleaved)."""
    warmup = min(spec.pp - stage - 1, spec.ga)
    return min(warmup + 1, spec.ga) * cost.act_bytes


# -- presets ----------------------------------------------------------------

@dataclass(frozen=True)
class ModelShape:
    name: str
    params: str
    layers: int
    heads: int
    experts: int
    top_k: int


MODELS = {
    "M1": ModelShape("M1", "235BA22B", 94, 64, 128, 8),
    "M2": ModelShape("M2", "503BA20B", 62, 32, 256, 8),
    "M3": ModelShape("M3", "1.01TA43B", 62, 64, 256, 8),
}

STRATEGIES = {
    "S.A": dict(tp=1, pp=4, vpp=0, ep=8, ga=8),
    "S.B": dict(tp=2, pp=4, vpp=2, ep=8, ga=16),
    "S.C": dict(tp=1, pp=16, vpp=0, ep=8, ga=32),
    "S.D": dict(tp=1, pp=8, vpp=0, ep=16, ga=16),
}


def model_shape(name: str) -> ModelShape:
    key = name.split(".")[0]
    if key not in MODELS:
        raise UnknownPreset(name)
    return MODELS[key]


def preset(name: str, world: int | None = None) -> tuple[ParallelismSpec, CostModel]:
    """``"S.A"``, ``"M2/S.C"`` etc. The DP degree is derived from ``world``
    (default: the smallest world whose dp*tp holds one EP group)."""
    model_name, _, strat = name.rpartition("/")
    if strat not in STRATEGIES:
        raise UnknownPreset(name)
    model = model_shape(model_name) if model_name else MODELS["M1"]
    st = STRATEGIES[strat]
    per_replica = st["tp"] * st["pp"]
    if world is None:
        world = per_replica * max(1, st["ep"] // st["tp"])
    if world % per_replica:
        raise InvalidSpec(f"world {world} not divisible by tp*pp={per_replica}")
    spec = ParallelismSpec(dp=world // per_replica, **st)
    cost = CostModel(moe_experts=model.experts, moe_top_k=model.top_k)
    return spec, cost


def with_cost(cost: CostModel, **kw) -> CostModel:
    return replace(cost, **kw)
