"""INI run configuration.

    [parallelism]   preset = S.A  world = 16    (or tp/pp/vpp/dp/ep/ga)
    [cost]          fwd = 10000000  p2p_ns = 1000000  ...
    [moe]           br_min = 0.71 ... events = 64  seed = 0  normalize = no
    [inject]        r1 = InRangeIndex label=batch.* kind=Broadcast
    [run]           seed, n_slots, slice_size, sandbox = 0-7, jitter,
                    gpu_capacity, cpu_capacity, prefetch, skip_transfers
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ValidationError
from .coordinator import InjectionRule
from .moe import BalanceRatioProfile
from .workload import CostModel, ParallelismSpec, preset


class ConfigError(ValidationError):
    pass


def parse_ranks(text: str) -> tuple[int, ...]:
    """``"0-7"``, ``"3"`` or ``"0,2,4-5"``."""
    out: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            a = int(lo)
            b = int(hi) if sep else a
        except ValueError:
            raise ConfigError(f"bad rank range {part!r}") from None
        if b < a:
            raise ConfigError(f"empty rank range {part!r}")
        out.extend(range(a, b + 1))
    return tuple(sorted(set(out)))


@dataclass
class RunConfig:
    spec: ParallelismSpec
    cost: CostModel
    preset_name: str | None = None
    profile: BalanceRatioProfile | None = None
    moe_events: int = 64
    moe_seed: int = 0
    moe_normalize: bool = False
    rules: list[InjectionRule] = field(default_factory=list)
    seed: int = 0
    n_slots: int | None = None
    slice_size: int = 8
    sandbox: tuple[int, ...] = (0,)
    jitter: float = 0.0
    gpu_capacity: int | None = None
    cpu_capacity: int | None = None
    prefetch: int = 4
    skip_transfers: bool = True

    def check(self) -> None:
        world = self.spec.world
        bad = [r for r in self.sandbox if not 0 <= r < world]
        if bad:
            raise ConfigError(f"sandbox ranks {bad} outside world of {world}")
        if not self.sandbox:
            raise ConfigError("empty sandbox")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")


_INT_COST = {f.name for f in fields(CostModel) if f.type in ("int",)}
_BOOL_COST = {"transient_comm_buffers", "control_broadcasts"}


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cp.read(p)
    elif text is not None:
        cp.read_string(text)
    try:
        return _from_parser(cp)
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None


def _from_parser(cp: configparser.ConfigParser) -> RunConfig:
    par = cp["parallelism"] if cp.has_section("parallelism") else {}
    name = par.get("preset")
    if name:
        world = int(par["world"]) if "world" in par else None
        spec, cost = preset(name, world)
    else:
        spec = ParallelismSpec(**{k: int(par[k]) for k in ("tp", "pp", "dp", "vpp", "ep", "ga") if k in par})
        cost = CostModel()
    spec.check()

    if cp.has_section("cost"):
        kw, compute = {}, dict(cost.compute_ns)
        for k, v in cp["cost"].items():
            if k in _BOOL_COST:
                kw[k] = cp["cost"].getboolean(k)
            elif k in _INT_COST:
                kw[k] = int(v)
            elif k in compute or k.startswith(("fwd", "bwd")):
                compute[k] = int(v)
            else:
                raise ConfigError(f"unknown [cost] key {k!r}")
        cost = replace(cost, compute_ns=compute, **kw)

    cfg = RunConfig(spec, cost, preset_name=name)
    if cp.has_section("moe"):
        m = cp["moe"]
        keys = ("br_min", "br_max", "br_avg", "br_std", "br_med", "br_skew")
        if any(k in m for k in keys):
            cfg.profile = BalanceRatioProfile(*(float(m[k]) for k in keys))
        cfg.moe_events = m.getint("events", cfg.moe_events)
        cfg.moe_seed = m.getint("seed", cfg.moe_seed)
        cfg.moe_normalize = m.getboolean("normalize", cfg.moe_normalize)
    if cp.has_section("inject"):
        cfg.rules = [InjectionRule.parse(v) for _, v in sorted(cp["inject"].items())]
    if cp.has_section("run"):
        r = cp["run"]
        cfg.seed = r.getint("seed", cfg.seed)
        if "n_slots" in r:
            cfg.n_slots = r.getint("n_slots")
        cfg.slice_size = r.getint("slice_size", cfg.slice_size)
        if "sandbox" in r:
            cfg.sandbox = parse_ranks(r["sandbox"])
        cfg.jitter = r.getfloat("jitter", cfg.jitter)
        for k in ("gpu_capacity", "cpu_capacity"):
            if k in r:
                setattr(cfg, k, r.getint(k))
        cfg.prefetch = r.getint("prefetch", cfg.prefetch)
        cfg.skip_transfers = r.getboolean("skip_transfers", cfg.skip_transfers)
    cfg.check()
    return cfg
