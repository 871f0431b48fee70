"""hybridemu command line.

    hybridemu generate       --config run.ini --out work/
    hybridemu collect        --config run.ini --out work/
    hybridemu slices         --config run.ini --input work/bare.ptg --out work/
    hybridemu calibrate      --input work/timed.ptg --out work/
    hybridemu emulate        --config run.ini --input work/calibrated.ptg --out work/
    hybridemu verify-pruning --cases 1000 --seed 7 --out work/
    hybridemu report         --input work/ [--input other/] --out work/

Exit status: 0 success, 1 invalid input or emulation error, 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .calibration import Simulated, calibrate, fill_all, plan_slices
from .collectives import verify_sweep
from .config import RunConfig, load_config, parse_ranks
from .coordinator import run_collection
from .errors import EmulationError
from .graph import InvalidGraph, MalformedRecord, parse_graph, serialize_graph, validate
from .moe import derive_schedule, schedule_csv
from .replay import EmulationReport, PoolConfig, emulate, export_chrome_trace
from .workload import Communicate, build_groups, build_programs


class InputError(EmulationError):
    pass


def _programs(cfg: RunConfig):
    groups = build_groups(cfg.spec)
    br = None
    if cfg.profile is not None and cfg.spec.moe:
        br = derive_schedule(cfg.profile, cfg.moe_events, cfg.spec.ep_effective, cfg.moe_seed,
                             cfg.moe_normalize)
    return groups, build_programs(cfg.spec, cfg.cost, br, groups), br


def _read_graph(path: Path):
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        return parse_graph(path.read_bytes())
    except MalformedRecord as e:
        raise InputError(f"{path}: {e}") from None
    except EmulationError as e:
        raise type(e)(f"{path}: {e}") from None


def _write(out: Path, name: str, data: str | bytes) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    if isinstance(data, str):
        data = data.encode()
    p.write_bytes(data)
    return p


def _describe_step(step) -> str:
    if isinstance(step, Communicate):
        d = step.descriptor
        op = d.reduce_op.value if d.reduce_op else "-"
        return f"M {d.kind.value} g={d.group} bytes={d.bytes} op={op} label={step.label}"
    mb = "-" if step.microbatch is None else step.microbatch
    return f"C {step.label} mb={mb} scale={step.scale:.6f} mem={step.mem_delta}"


def cmd_generate(cfg: RunConfig, out: Path) -> list[Path]:
    groups, programs, br = _programs(cfg)
    lines = [f"# {cfg.spec.tag()} world={cfg.spec.world}"]
    for gid in sorted(groups):
        g = groups[gid]
        lines.append(f"G {gid} {g.role} {','.join(map(str, g.members))}")
    for r in sorted(programs):
        lines.append(f"R {r} steps={len(programs[r].steps)}")
        lines.extend("  " + _describe_step(s) for s in programs[r].steps)
    written = [_write(out, "workload.txt", "\n".join(lines) + "\n")]
    if br is not None:
        written.append(_write(out, "br_schedule.csv", schedule_csv(br)))
    return written


def cmd_collect(cfg: RunConfig, out: Path) -> list[Path]:
    groups, programs, _ = _programs(cfg)
    n_slots = cfg.n_slots or cfg.spec.world
    g, stats, _ = run_collection(programs, n_slots, cfg.rules, cfg.seed, cost=cfg.cost,
                                 world=cfg.spec.world, groups=groups)
    g.meta.update(spec=cfg.spec.tag(), slots=str(n_slots))
    return [_write(out, "bare.ptg", serialize_graph(g)), _write(out, "collect.txt", stats.as_text())]


def cmd_slices(cfg: RunConfig, bare_path: Path, out: Path) -> list[Path]:
    bare = _read_graph(bare_path)
    _, programs, _ = _programs(cfg)
    slices = plan_slices(bare.world_size, cfg.slice_size)
    timed, _ = fill_all(bare.bare(), slices, Simulated(programs, cfg.cost, cfg.jitter, cfg.seed))
    return [_write(out, "timed.ptg", serialize_graph(timed))]


def cmd_calibrate(timed_path: Path, out: Path) -> list[Path]:
    timed = _read_graph(timed_path)
    cal = calibrate(timed.with_durations({}, clear_starts=True))
    bad = validate(cal)
    if bad:
        raise InvalidGraph(bad)
    return [_write(out, "calibrated.ptg", serialize_graph(cal))]


def cmd_emulate(cfg: RunConfig, cal_path: Path, out: Path) -> list[Path]:
    cal = _read_graph(cal_path)
    if cal.state() != "calibrated":
        raise InputError(f"{cal_path}: graph is {cal.state()}, expected calibrated")
    _, programs, _ = _programs(cfg)
    pool = PoolConfig(cfg.gpu_capacity, cfg.cpu_capacity, cfg.prefetch, cfg.skip_transfers)
    rep = emulate(cal, cfg.sandbox, programs, cfg.cost, pool)
    return _write_report(rep, out)


def _write_report(rep: EmulationReport, out: Path) -> list[Path]:
    mem_lines = ["rank,time_ns,bytes"]
    for r in sorted(rep.timelines):
        mem_lines.extend(f"{r},{t},{b}" for t, b in rep.timelines[r])
    return [_write(out, "report.txt", rep.as_text()),
            _write(out, "nodes.csv", rep.as_csv()),
            _write(out, "memory.csv", "\n".join(mem_lines) + "\n"),
            _write(out, "trace.json", export_chrome_trace(rep))]


def load_report(d: Path) -> EmulationReport:
    """Rebuild a report from the files ``emulate`` writes."""
    if not (d / "report.txt").exists():
        raise InputError(f"{d}: no report.txt")
    kv = {}
    for line in (d / "report.txt").read_text().splitlines():
        k, _, v = line.partition(" ")
        kv[k] = v
    sandbox = tuple(parse_ranks(kv["sandbox"])) if kv.get("sandbox", "-") != "-" else ()
    peaks = {int(k[len("peak_bytes["):-1]): int(v) for k, v in kv.items() if k.startswith("peak_bytes[")}
    times, ranks, labels = {}, {}, {}
    with open(d / "nodes.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            nid = int(row["node"])
            times[nid] = (int(row["start_ns"]), int(row["duration_ns"]))
            ranks[nid] = int(row["rank"])
            labels[nid] = row["label"]
    timelines: dict[int, list] = {}
    if (d / "memory.csv").exists():
        with open(d / "memory.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                timelines.setdefault(int(row["rank"]), []).append((int(row["time_ns"]), int(row["bytes"])))
    finish: dict[int, int] = {}
    for nid, (s, dur) in times.items():
        finish[ranks[nid]] = max(finish.get(ranks[nid], 0), s + dur)
    return EmulationReport(int(kv["iteration_time_ns"]), sandbox, peaks, timelines, times, ranks, labels,
                           finish, int(kv.get("bytes_moved", 0)))


def cmd_report(dirs: list[Path], out: Path) -> list[Path]:
    from . import plotting

    reports = [(d, load_report(d)) for d in dirs]
    base = reports[0][1].iteration_time
    header = ["run", "iteration_ms", "vs_first_%", "max_peak_GiB", "sandbox"]
    rows = []
    for d, rep in reports:
        pk = max(rep.peaks.values(), default=0)
        rel = 100.0 * (rep.iteration_time - base) / base if base else 0.0
        rows.append([str(d), f"{rep.iteration_time / 1e6:.3f}", f"{rel:+.3f}", f"{pk / 2**30:.3f}",
                     ",".join(map(str, rep.sandbox)) or "-"])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    table = "\n".join([fmt.format(*header)] + [fmt.format(*r) for r in rows]) + "\n"
    csv_text = "\n".join(",".join(x) for x in [header] + rows) + "\n"
    written = [_write(out, "comparison.txt", table), _write(out, "comparison.csv", csv_text)]
    for i, (_, rep) in enumerate(reports):
        written.append(plotting.gantt(rep, out / f"gantt_{i}.png"))
        written.append(plotting.memory_plot(rep, out / f"memory_{i}.png"))
    sys.stdout.write(table)
    return written


def cmd_verify_pruning(cases: int, seed: int, out: Path | None) -> tuple[bool, list[Path]]:
    summary = verify_sweep(cases, seed)
    text = summary.as_text()
    sys.stdout.write(text)
    written = [_write(out, "pruning.txt", text)] if out else []
    return summary.ok, written


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridemu", description="Hybrid emulation of distributed training.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True, inp=False):
        if config:
            p.add_argument("--config", required=True, type=Path)
        if inp:
            p.add_argument("--input", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--seed", type=int)
        p.add_argument("--sandbox")
        p.add_argument("--slice-size", type=int)
        p.add_argument("--jitter", type=float)
        return p

    common(sub.add_parser("generate", help="write per-rank programs"))
    common(sub.add_parser("collect", help="collect the bare execution graph"))
    common(sub.add_parser("slices", help="fill node durations slice by slice"), inp=True)
    common(sub.add_parser("calibrate", help="align slices into one schedule"), config=False, inp=True)
    common(sub.add_parser("emulate", help="hybrid emulation of one iteration"), inp=True)
    vp = common(sub.add_parser("verify-pruning", help="randomised pruned-collective check"), config=False)
    vp.add_argument("--cases", type=int, default=1000)
    rp = sub.add_parser("report", help="compare emulation runs and draw figures")
    rp.add_argument("--input", required=True, type=Path, action="append")
    rp.add_argument("--out", type=Path, default=Path("."))
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sandbox is not None:
        cfg.sandbox = parse_ranks(args.sandbox)
    if args.slice_size is not None:
        cfg.slice_size = args.slice_size
    if args.jitter is not None:
        cfg.jitter = args.jitter
    cfg.check()
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command
    if cmd == "generate":
        written = cmd_generate(_config(args), args.out)
    elif cmd == "collect":
        written = cmd_collect(_config(args), args.out)
    elif cmd == "slices":
        written = cmd_slices(_config(args), args.input, args.out)
    elif cmd == "calibrate":
        written = cmd_calibrate(args.input, args.out)
    elif cmd == "emulate":
        written = cmd_emulate(_config(args), args.input, args.out)
        sys.stdout.write((args.out / "report.txt").read_text())
    elif cmd == "verify-pruning":
        ok, written = cmd_verify_pruning(args.cases, 0 if args.seed is None else args.seed,
                                         args.out)
        if not ok:
            return 1
    else:
        written = cmd_report(args.input, args.out)
    for p in written:
        print(f"wrote {p}", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        code = run(argv)
    except EmulationError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        code = 1
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - last-resort mapping to exit code 2
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        code = 2
    return code


if __name__ == "__main__":
    sys.exit(main())
